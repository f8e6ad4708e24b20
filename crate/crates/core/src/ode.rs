//! Adaptive Dormand-Prince 5(4) integrator with quartic dense output.
//!
//! Works on plain `Vec<T>` states so vector ODEs, flattened matrix ODEs and
//! subspace sweeps all share one kernel. Integration runs forward or backward
//! depending on the ordering of the endpoints; dense output covers the whole
//! span either way. An optional post-step hook lets callers re-project the
//! accepted state (subspace propagation) at the cost of disabling first-same-
//! as-last reuse.

use crate::error::{Error, Result};
use crate::scalar::Real;

const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone)]
pub struct OdeOptions<T> {
    pub rtol: T,
    pub atol: T,
    pub h_init: Option<T>,
    pub h_max: T,
    /// Accepted states with any |component| above this abort with `BlowUp`.
    pub blowup: T,
    pub max_steps: usize,
}

impl<T: Real> OdeOptions<T> {
    pub fn new(rtol: f64, atol: f64) -> Self {
        OdeOptions {
            rtol: T::of(rtol),
            atol: T::of(atol),
            h_init: None,
            h_max: T::of(0.5),
            blowup: T::of(1e12),
            max_steps: 2_000_000,
        }
    }

    pub fn with_blowup(mut self, limit: f64) -> Self {
        self.blowup = T::of(limit);
        self
    }

    pub fn with_h_max(mut self, h: f64) -> Self {
        self.h_max = T::of(h);
        self
    }
}

#[derive(Debug, Clone)]
struct Segment<T> {
    t0: T,
    t1: T,
    rcont: [Vec<T>; 5],
}

/// Continuous solution over the integration span, evaluable at any interior
/// time via per-step quartic interpolants that match the accepted endpoints
/// exactly.
#[derive(Debug, Clone)]
pub struct DenseSolution<T> {
    t_start: T,
    t_end: T,
    dir: T,
    segments: Vec<Segment<T>>,
    y_end: Vec<T>,
    pub naccept: usize,
    pub nreject: usize,
    pub nrhs: usize,
}

impl<T: Real> DenseSolution<T> {
    pub fn t_start(&self) -> T {
        self.t_start
    }

    pub fn t_end(&self) -> T {
        self.t_end
    }

    pub fn y_end(&self) -> &[T] {
        &self.y_end
    }

    pub fn dim(&self) -> usize {
        self.y_end.len()
    }

    fn locate(&self, t: T) -> usize {
        let dir = self.dir;
        let lo = (t - self.t_start) * dir;
        let hi = (self.t_end - t) * dir;
        let span = (self.t_end - self.t_start).abs();
        let slack = (T::of(1e-9) * span.max(T::one())).max(T::of(1e-12));
        assert!(
            lo >= -slack && hi >= -slack,
            "dense evaluation outside span: t = {t}, span = [{}, {}]",
            self.t_start,
            self.t_end
        );
        let idx = self
            .segments
            .partition_point(|seg| (seg.t1 - t) * dir < T::zero());
        idx.min(self.segments.len().saturating_sub(1))
    }

    pub fn eval_into(&self, t: T, out: &mut [T]) {
        if self.segments.is_empty() {
            out.copy_from_slice(&self.y_end);
            return;
        }
        let seg = &self.segments[self.locate(t)];
        let h = seg.t1 - seg.t0;
        let theta = (t - seg.t0) / h;
        let s1 = T::one() - theta;
        for (i, o) in out.iter_mut().enumerate() {
            let [r1, r2, r3, r4, r5] = [
                seg.rcont[0][i],
                seg.rcont[1][i],
                seg.rcont[2][i],
                seg.rcont[3][i],
                seg.rcont[4][i],
            ];
            *o = r1 + theta * (r2 + s1 * (r3 + theta * (r4 + s1 * r5)));
        }
    }

    pub fn eval(&self, t: T) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.eval_into(t, &mut out);
        out
    }
}

fn rms_scaled<T: Real>(err: &[T], y0: &[T], y1: &[T], atol: T, rtol: T) -> T {
    let n = T::of(err.len() as f64);
    let mut acc = T::zero();
    for i in 0..err.len() {
        let sc = atol + rtol * y0[i].abs().max(y1[i].abs());
        let q = err[i] / sc;
        acc = acc + q * q;
    }
    (acc / n).sqrt()
}

/// Post-step hook: runs after every accepted step and may modify the state
/// in place.
pub type Projection<'a, T> = &'a mut dyn FnMut(T, &mut [T]);

/// Integrate `dy/dt = f(t, y)` from `t0` to `t_end` (either direction).
///
/// With a `project` hook the dense interpolant targets the projected
/// endpoint of each step.
pub fn integrate<T, F>(
    mut f: F,
    t0: T,
    y0: &[T],
    t_end: T,
    opts: &OdeOptions<T>,
    mut project: Option<Projection<'_, T>>,
) -> Result<DenseSolution<T>>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
{
    let n = y0.len();
    let dir = if t_end >= t0 { T::one() } else { -T::one() };
    let span = (t_end - t0).abs();

    let mut sol = DenseSolution {
        t_start: t0,
        t_end,
        dir,
        segments: Vec::new(),
        y_end: y0.to_vec(),
        naccept: 0,
        nreject: 0,
        nrhs: 0,
    };
    if span == T::zero() || n == 0 {
        return Ok(sol);
    }

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k: [Vec<T>; 7] = std::array::from_fn(|_| vec![T::zero(); n]);
    let mut ytmp = vec![T::zero(); n];
    let mut y_new = vec![T::zero(); n];
    let mut err_vec = vec![T::zero(); n];

    let stage = |k: &[Vec<T>; 7], y: &[T], ytmp: &mut [T], h: T, coef: &[(usize, f64)]| {
        for i in 0..y.len() {
            let mut acc = T::zero();
            for &(j, c) in coef {
                acc = acc + T::of(c) * k[j][i];
            }
            ytmp[i] = y[i] + h * acc;
        }
    };

    f(t, &y, &mut k[0])?;
    sol.nrhs += 1;

    let mut h = match opts.h_init {
        Some(h) => h.abs().min(opts.h_max) * dir,
        None => initial_step(&mut f, t, &y, &k[0].clone(), dir, span, opts, &mut sol.nrhs)?,
    };

    let mut fsal_valid = true;
    let mut just_rejected = false;
    loop {
        if sol.naccept + sol.nreject > opts.max_steps {
            return Err(Error::Integration(format!(
                "step limit {} exhausted at t = {}",
                opts.max_steps,
                t.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let remaining = (t_end - t) * dir;
        if remaining <= T::of(1e-13) * span.max(T::one()) {
            break;
        }
        if h.abs() > remaining {
            h = t_end - t;
        }
        if h.abs() < T::of(1e-14) * t.abs().max(T::one()) {
            return Err(Error::Integration(format!(
                "step size underflow at t = {}",
                t.to_f64().unwrap_or(f64::NAN)
            )));
        }

        if !fsal_valid {
            f(t, &y, &mut k[0])?;
            sol.nrhs += 1;
            fsal_valid = true;
        }

        stage(&k, &y, &mut ytmp, h, &[(0, A21)]);
        f(t + T::of(C2) * h, &ytmp, &mut k[1])?;
        stage(&k, &y, &mut ytmp, h, &[(0, A31), (1, A32)]);
        f(t + T::of(C3) * h, &ytmp, &mut k[2])?;
        stage(&k, &y, &mut ytmp, h, &[(0, A41), (1, A42), (2, A43)]);
        f(t + T::of(C4) * h, &ytmp, &mut k[3])?;
        stage(
            &k,
            &y,
            &mut ytmp,
            h,
            &[(0, A51), (1, A52), (2, A53), (3, A54)],
        );
        f(t + T::of(C5) * h, &ytmp, &mut k[4])?;
        stage(
            &k,
            &y,
            &mut ytmp,
            h,
            &[(0, A61), (1, A62), (2, A63), (3, A64), (4, A65)],
        );
        f(t + h, &ytmp, &mut k[5])?;
        stage(
            &k,
            &y,
            &mut y_new,
            h,
            &[(0, A71), (2, A73), (3, A74), (4, A75), (5, A76)],
        );
        f(t + h, &y_new, &mut k[6])?;
        sol.nrhs += 6;

        for i in 0..n {
            err_vec[i] = h
                * (T::of(E1) * k[0][i]
                    + T::of(E3) * k[2][i]
                    + T::of(E4) * k[3][i]
                    + T::of(E5) * k[4][i]
                    + T::of(E6) * k[5][i]
                    + T::of(E7) * k[6][i]);
        }
        let err = rms_scaled(&err_vec, &y, &y_new, opts.atol, opts.rtol);

        if err <= T::one() {
            let t_new = t + h;
            if let Some(hook) = project.as_deref_mut() {
                hook(t_new, &mut y_new);
            }

            let mut rcont = [
                y.clone(),
                vec![T::zero(); n],
                vec![T::zero(); n],
                vec![T::zero(); n],
                vec![T::zero(); n],
            ];
            for i in 0..n {
                let ydiff = y_new[i] - y[i];
                let bspl = h * k[0][i] - ydiff;
                rcont[1][i] = ydiff;
                rcont[2][i] = bspl;
                rcont[3][i] = ydiff - h * k[6][i] - bspl;
                rcont[4][i] = h
                    * (T::of(D1) * k[0][i]
                        + T::of(D3) * k[2][i]
                        + T::of(D4) * k[3][i]
                        + T::of(D5) * k[4][i]
                        + T::of(D6) * k[5][i]
                        + T::of(D7) * k[6][i]);
            }
            sol.segments.push(Segment {
                t0: t,
                t1: t_new,
                rcont,
            });

            t = t_new;
            std::mem::swap(&mut y, &mut y_new);
            sol.naccept += 1;

            let worst = y.iter().fold(T::zero(), |m, v| m.max(v.abs()));
            if worst > opts.blowup {
                return Err(Error::BlowUp {
                    t: t.to_f64().unwrap_or(f64::NAN),
                    limit: opts.blowup.to_f64().unwrap_or(f64::NAN),
                });
            }

            if project.is_some() {
                // The projected endpoint invalidates k7 as the next k1.
                fsal_valid = false;
            } else {
                k.swap(0, 6);
            }

            let facmax = if just_rejected { T::one() } else { T::of(5.0) };
            let fac = if err == T::zero() {
                facmax
            } else {
                (T::of(0.9) * err.powf(T::of(-0.2)))
                    .min(facmax)
                    .max(T::of(0.2))
            };
            h = (h * fac).abs().min(opts.h_max) * dir;
            just_rejected = false;
        } else {
            let fac = (T::of(0.9) * err.powf(T::of(-0.2)))
                .max(T::of(0.2))
                .min(T::one());
            h = h * fac;
            sol.nreject += 1;
            just_rejected = true;
        }
    }

    sol.y_end = y;
    sol.t_end = t;
    Ok(sol)
}

/// Hairer's automatic initial step selection, adapted to signed direction.
#[allow(clippy::too_many_arguments)]
fn initial_step<T, F>(
    f: &mut F,
    t0: T,
    y0: &[T],
    f0: &[T],
    dir: T,
    span: T,
    opts: &OdeOptions<T>,
    nrhs: &mut usize,
) -> Result<T>
where
    T: Real,
    F: FnMut(T, &[T], &mut [T]) -> Result<()>,
{
    let n = y0.len();
    let sc: Vec<T> = y0
        .iter()
        .map(|&v| opts.atol + opts.rtol * v.abs())
        .collect();
    let rms = |v: &[T]| -> T {
        let mut acc = T::zero();
        for i in 0..n {
            let q = v[i] / sc[i];
            acc = acc + q * q;
        }
        (acc / T::of(n as f64)).sqrt()
    };
    let d0 = rms(y0);
    let d1 = rms(f0);
    let mut h0 = if d0 < T::of(1e-5) || d1 < T::of(1e-5) {
        T::of(1e-6)
    } else {
        T::of(0.01) * (d0 / d1)
    };
    h0 = h0.min(span).min(opts.h_max);

    let y1: Vec<T> = (0..n).map(|i| y0[i] + dir * h0 * f0[i]).collect();
    let mut f1 = vec![T::zero(); n];
    f(t0 + dir * h0, &y1, &mut f1)?;
    *nrhs += 1;
    let df: Vec<T> = (0..n).map(|i| f1[i] - f0[i]).collect();
    let d2 = rms(&df) / h0;

    let dmax = d1.max(d2);
    let h1 = if dmax <= T::of(1e-15) {
        (h0 * T::of(1e-3)).max(T::of(1e-6))
    } else {
        (T::of(0.01) / dmax).powf(T::of(0.2))
    };
    Ok((T::of(100.0) * h0).min(h1).min(span).min(opts.h_max) * dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(rtol: f64, atol: f64) -> OdeOptions<f64> {
        OdeOptions::new(rtol, atol)
    }

    #[test]
    fn exponential_decay_forward() {
        let sol = integrate(
            |_t, y: &[f64], dy: &mut [f64]| {
                dy[0] = -y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            5.0,
            &opts(1e-12, 1e-13),
            None,
        )
        .unwrap();
        let exact = (-5.0f64).exp();
        assert!((sol.y_end()[0] - exact).abs() / exact < 1e-10);
    }

    #[test]
    fn exponential_decay_backward() {
        let sol = integrate(
            |_t, y: &[f64], dy: &mut [f64]| {
                dy[0] = -y[0];
                Ok(())
            },
            5.0,
            &[(-5.0f64).exp()],
            0.0,
            &opts(1e-12, 1e-13),
            None,
        )
        .unwrap();
        assert!((sol.y_end()[0] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn dense_output_tracks_analytic_solution() {
        // y' = y cos t has solution exp(sin t).
        let sol = integrate(
            |t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[0] * t.cos();
                Ok(())
            },
            0.0,
            &[1.0],
            10.0,
            &opts(1e-10, 1e-12),
            None,
        )
        .unwrap();
        // Interior interpolation runs a factor of a few tens above the
        // endpoint tolerance; that ratio is the contract callers budget for.
        let mut worst = 0.0f64;
        for i in 0..=1000 {
            let t = 10.0 * i as f64 / 1000.0;
            let got = sol.eval(t)[0];
            let exact = t.sin().exp();
            worst = worst.max((got - exact).abs());
        }
        assert!(worst < 1e-8, "worst dense error {worst}");
    }

    #[test]
    fn dense_output_backward_span() {
        let sol = integrate(
            |t: f64, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[0] * t.cos();
                Ok(())
            },
            10.0,
            &[10.0f64.sin().exp()],
            0.0,
            &opts(1e-10, 1e-12),
            None,
        )
        .unwrap();
        for i in 0..=100 {
            let t = 10.0 * i as f64 / 100.0;
            assert!((sol.eval(t)[0] - t.sin().exp()).abs() < 1e-8);
        }
    }

    #[test]
    fn harmonic_oscillator_phase_accuracy() {
        let sol = integrate(
            |_t, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            &[1.0, 0.0],
            20.0,
            &opts(1e-12, 1e-13),
            None,
        )
        .unwrap();
        assert!((sol.y_end()[0] - 20.0f64.cos()).abs() < 1e-9);
        assert!((sol.y_end()[1] + 20.0f64.sin()).abs() < 1e-9);
    }

    #[test]
    fn polynomial_rhs_endpoint_is_machine_exact() {
        // A fifth-order method integrates y' = t^4 exactly.
        let mut o = opts(1e-2, 1e-2);
        o.h_init = Some(0.5);
        let sol = integrate(
            |t: f64, _y: &[f64], dy: &mut [f64]| {
                dy[0] = t * t * t * t;
                Ok(())
            },
            0.0,
            &[0.0],
            0.5,
            &o,
            None,
        )
        .unwrap();
        assert!((sol.y_end()[0] - 0.5f64.powi(5) / 5.0).abs() < 1e-16);
    }

    #[test]
    fn blowup_guard_fires() {
        let res = integrate(
            |_t, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            2.0,
            &opts(1e-8, 1e-8).with_blowup(1e6),
            None,
        );
        match res {
            Err(Error::BlowUp { t, .. }) => assert!(t < 1.2, "blow-up reported at {t}"),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn projection_hook_constrains_state() {
        // Growth along the flow, renormalized to the unit circle each step.
        let mut hook = |_t: f64, y: &mut [f64]| {
            let norm = (y[0] * y[0] + y[1] * y[1]).sqrt();
            y[0] /= norm;
            y[1] /= norm;
        };
        let sol = integrate(
            |_t, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[0];
                dy[1] = 2.0 * y[1];
                Ok(())
            },
            0.0,
            &[0.6, 0.8],
            30.0,
            &opts(1e-10, 1e-12),
            Some(&mut hook),
        )
        .unwrap();
        let norm = (sol.y_end()[0].powi(2) + sol.y_end()[1].powi(2)).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        // The faster direction dominates under repeated normalization.
        assert!(sol.y_end()[1].abs() > 0.999);
    }

    #[test]
    fn rhs_errors_propagate() {
        let res = integrate(
            |_t, _y: &[f64], _dy: &mut [f64]| Err(Error::Domain("forced".into())),
            0.0,
            &[1.0],
            1.0,
            &opts(1e-8, 1e-8),
            None,
        );
        assert!(matches!(res, Err(Error::Domain(_))));
    }

    #[test]
    fn single_precision_kernel_runs() {
        let sol = integrate(
            |_t, y: &[f32], dy: &mut [f32]| {
                dy[0] = -y[0];
                Ok(())
            },
            0.0f32,
            &[1.0f32],
            1.0f32,
            &OdeOptions::<f32>::new(1e-6, 1e-7),
            None,
        )
        .unwrap();
        assert!((sol.y_end()[0] - (-1.0f32).exp()).abs() < 1e-4);
    }

    #[test]
    fn dense_eval_at_segment_boundaries_matches_endpoints() {
        let sol = integrate(
            |t: f64, _y: &[f64], dy: &mut [f64]| {
                dy[0] = (3.0 * t).sin();
                Ok(())
            },
            0.0,
            &[0.25],
            4.0,
            &opts(1e-10, 1e-12),
            None,
        )
        .unwrap();
        assert_eq!(sol.eval(0.0)[0], 0.25);
        assert!((sol.eval(4.0)[0] - sol.y_end()[0]).abs() < 1e-15);
    }
}
