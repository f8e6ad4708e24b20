/// Floating-point scalar abstraction for the numerical kernels (expression
/// evaluation, adaptive integration). Engines and reports work with the
/// concrete [`crate::Scalar`] alias; the kernels stay generic so the same
/// code runs at f32 or f64 precision.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + 'static
{
    /// Lossy conversion from f64; panics only for exotic scalar types that
    /// cannot represent ordinary finite constants.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 constant must be representable")
    }
}

impl<T> Real for T where
    T: num_traits::Float
        + num_traits::FromPrimitive
        + std::fmt::Debug
        + std::fmt::Display
        + std::iter::Sum
        + 'static
{
}
