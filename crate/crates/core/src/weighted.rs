//! Uniform-grid paths on [0, T] measured in the weighted sup norm
//! sup_t e^{-b t} |phi(t)|, the arena of the fixed-point iteration.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Continuous path sampled on the uniform grid t_i = i * step, evaluated
/// between nodes by linear interpolation. The weight b defines the norm
/// max_i e^{-b t_i} |v_i|.
#[derive(Debug, Clone)]
pub struct WeightedPath {
    step: f64,
    values: Vec<DVector<f64>>,
    weight_b: f64,
}

impl WeightedPath {
    pub fn new(step: f64, values: Vec<DVector<f64>>, weight_b: f64) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Config(format!(
                "grid step must be positive, got {step}"
            )));
        }
        if !(weight_b > 0.0) || !weight_b.is_finite() {
            return Err(Error::Config(format!(
                "weight must be positive, got {weight_b}"
            )));
        }
        if values.len() < 2 {
            return Err(Error::Config("a path needs at least two grid nodes".into()));
        }
        let n = values[0].len();
        for (i, v) in values.iter().enumerate() {
            if v.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "node {i} has dimension {} instead of {n}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("node {i} is not finite")));
            }
        }
        Ok(WeightedPath {
            step,
            values,
            weight_b,
        })
    }

    /// Zero path covering [0, t_end] (t_end rounded up to a whole step).
    pub fn zeros(n: usize, step: f64, t_end: f64, weight_b: f64) -> Result<Self> {
        let nodes = (t_end / step).ceil() as usize + 1;
        Self::new(step, vec![DVector::zeros(n); nodes.max(2)], weight_b)
    }

    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn weight_b(&self) -> f64 {
        self.weight_b
    }

    pub fn t_end(&self) -> f64 {
        (self.values.len() - 1) as f64 * self.step
    }

    pub fn nodes(&self) -> &[DVector<f64>] {
        &self.values
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let t_end = self.t_end();
        assert!(
            t >= -1e-9 && t <= t_end + 1e-9,
            "path evaluated at {t} outside [0, {t_end}]"
        );
        let x = (t / self.step).clamp(0.0, (self.values.len() - 1) as f64);
        let i = (x.floor() as usize).min(self.values.len() - 2);
        let w = x - i as f64;
        let (a, b) = (&self.values[i], &self.values[i + 1]);
        for k in 0..out.len() {
            out[k] = a[k] + w * (b[k] - a[k]);
        }
    }

    pub fn eval_vec(&self, t: f64) -> DVector<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out);
        DVector::from_vec(out)
    }

    /// max_i e^{-b t_i} |v_i|.
    pub fn weighted_norm(&self) -> f64 {
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| (-self.weight_b * i as f64 * self.step).exp() * v.norm())
            .fold(0.0, f64::max)
    }

    /// Weighted norm of the difference; grids must match.
    pub fn weighted_distance(&self, other: &WeightedPath) -> f64 {
        assert_eq!(
            self.values.len(),
            other.values.len(),
            "grid length mismatch"
        );
        assert!((self.step - other.step).abs() < 1e-12, "grid step mismatch");
        self.values
            .iter()
            .zip(&other.values)
            .enumerate()
            .map(|(i, (a, b))| (-self.weight_b * i as f64 * self.step).exp() * (a - b).norm())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> WeightedPath {
        // phi(t) = (t, 2t) on [0, 1] with step 0.25.
        let values = (0..5)
            .map(|i| {
                let t = 0.25 * i as f64;
                DVector::from_vec(vec![t, 2.0 * t])
            })
            .collect();
        WeightedPath::new(0.25, values, 1.0).unwrap()
    }

    #[test]
    fn linear_interpolation_is_exact_on_linear_data() {
        let p = ramp();
        for &t in &[0.0, 0.1, 0.37, 0.5, 0.99, 1.0] {
            let v = p.eval_vec(t);
            assert!((v[0] - t).abs() < 1e-15);
            assert!((v[1] - 2.0 * t).abs() < 1e-14);
        }
    }

    #[test]
    fn weighted_norm_balances_growth_against_weight() {
        // |phi(t_i)| = sqrt(5) t_i, weight e^{-t_i}: max of sqrt(5) t e^{-t}
        // over the grid is at t = 1 (grid ends before the continuous peak).
        let p = ramp();
        let want = 5.0f64.sqrt() * (-1.0f64).exp();
        assert!((p.weighted_norm() - want).abs() < 1e-12);
    }

    #[test]
    fn distance_of_equal_paths_is_zero() {
        let p = ramp();
        assert_eq!(p.weighted_distance(&ramp()), 0.0);
        let z = WeightedPath::zeros(2, 0.25, 1.0, 1.0).unwrap();
        assert!((p.weighted_distance(&z) - p.weighted_norm()).abs() < 1e-15);
    }

    #[test]
    fn zeros_rounds_span_up_to_grid() {
        let z = WeightedPath::zeros(1, 0.25, 1.05, 1.0).unwrap();
        assert_eq!(z.nodes().len(), 6);
        assert!((z.t_end() - 1.25).abs() < 1e-15);
        assert_eq!(z.weighted_norm(), 0.0);
    }

    #[test]
    fn malformed_paths_are_rejected() {
        assert!(WeightedPath::new(0.0, vec![DVector::zeros(1); 3], 1.0).is_err());
        assert!(WeightedPath::new(0.1, vec![DVector::zeros(1)], 1.0).is_err());
        assert!(WeightedPath::new(0.1, vec![DVector::zeros(1); 3], 0.0).is_err());
        let bad = vec![DVector::zeros(2), DVector::zeros(3)];
        assert!(WeightedPath::new(0.1, bad, 1.0).is_err());
        let nan = vec![DVector::zeros(1), DVector::from_vec(vec![f64::NAN])];
        assert!(WeightedPath::new(0.1, nan, 1.0).is_err());
    }
}
