//! Construction of the conjugacy maps: the fixed point z* by Picard
//! iteration of the Green-kernel operator, w* by direct quadrature, the maps
//! H and G, the alternative form of G through the principal matrix, and the
//! Jacobian of G.

use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};

use crate::conditions::{check_theorem1, check_theorem2, ConditionReport};
use crate::dichotomy::ConstantsBundle;
use crate::error::{Error, Result};
use crate::flow::{FifoMap, FlowEngine, SweepSolution};
use crate::linalg::spectral_norm;
use crate::weighted::WeightedPath;

const MAX_PICARD: usize = 200;
const PATH_CACHE_CAP: usize = 128;

// One PathRepr per heap-allocated DensePath; the variant size gap is moot.
#[allow(clippy::large_enum_variant)]
enum PathRepr {
    Zero,
    Swept { sign: f64, sweep: SweepSolution },
}

/// One conjugacy integral t ↦ sign · ∫₀ᵀ G(t,s) g(s) ds, valid on [0, T];
/// evaluation reads the integrator's dense output, never a resampled grid.
pub struct DensePath {
    n: usize,
    hi: f64,
    repr: PathRepr,
}

impl DensePath {
    fn zero(n: usize, hi: f64) -> Self {
        DensePath {
            n,
            hi,
            repr: PathRepr::Zero,
        }
    }

    fn swept(sign: f64, sweep: SweepSolution) -> Self {
        DensePath {
            n: sweep.state_len(),
            hi: sweep.out_hi(),
            repr: PathRepr::Swept { sign, sweep },
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn t_end(&self) -> f64 {
        self.hi
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        match &self.repr {
            PathRepr::Zero => out.fill(0.0),
            PathRepr::Swept { sign, sweep } => {
                sweep.eval_into(t, out);
                for v in out.iter_mut() {
                    *v *= sign;
                }
            }
        }
    }

    pub fn eval_vec(&self, t: f64) -> DVector<f64> {
        let mut out = vec![0.0; self.n];
        self.eval_into(t, &mut out);
        DVector::from_vec(out)
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct AnchorKey {
    t_bits: u64,
    y_bits: Vec<u64>,
}

fn anchor_key(tau: f64, y: &DVector<f64>) -> AnchorKey {
    AnchorKey {
        t_bits: tau.to_bits(),
        y_bits: y.iter().map(|v| v.to_bits()).collect(),
    }
}

/// Outcome of one Picard run: the sampled path, per-iteration contraction
/// ratios, and the dense representation used for high-accuracy evaluation.
pub struct FixedPointRun {
    pub path: WeightedPath,
    pub iterations: usize,
    pub ratios: Vec<f64>,
    pub final_delta: f64,
    pub dense: Rc<DensePath>,
}

/// Conjugacy constructor bound to one flow engine and one constants bundle.
///
/// The quadrature horizon T is chosen so the truncated tail of every
/// infinite-horizon integral stays below the tail tolerance for queries up
/// to t_query_max: K M e^{(mu+delta-alpha)(T-t)}/(alpha-mu-delta) <= tail_tol.
/// Construction fails if any theorem-1 margin fails (the fixed point would
/// not be a contraction) or if T does not fit inside the flow window.
pub struct ConjugacyEngine {
    flow: FlowEngine,
    bundle: ConstantsBundle,
    theorem1: ConditionReport,
    theorem2: Option<ConditionReport>,
    q: f64,
    t_query_max: f64,
    t_quad: f64,
    step: f64,
    tol_fp: f64,
    tail_tol: f64,
    z_cache: RefCell<FifoMap<AnchorKey, Rc<DensePath>>>,
    w_cache: RefCell<FifoMap<AnchorKey, Rc<DensePath>>>,
}

impl ConjugacyEngine {
    pub fn new(flow: FlowEngine, bundle: ConstantsBundle, t_query_max: f64) -> Result<Self> {
        let theorem1 = check_theorem1(&bundle)?;
        if !theorem1.overall {
            let failed: Vec<&str> = theorem1
                .margins
                .iter()
                .filter(|m| !m.pass)
                .map(|m| m.name)
                .collect();
            return Err(Error::Config(format!(
                "conjugacy construction needs every base margin to pass; failing: {}",
                failed.join(", ")
            )));
        }
        let theorem2 = if bundle.c > 2.0 {
            Some(check_theorem2(&bundle)?)
        } else {
            None
        };
        if !(t_query_max >= 0.0) || !t_query_max.is_finite() {
            return Err(Error::Config(format!(
                "query horizon must be a nonnegative real, got {t_query_max}"
            )));
        }
        let tail_rate = bundle.alpha - bundle.mu - bundle.delta;
        if tail_rate <= 0.0 {
            return Err(Error::DivergentTail(format!(
                "alpha - mu - delta = {tail_rate} must be positive to truncate tails"
            )));
        }
        let numerics = flow.system().numerics.clone();
        let step = numerics.step;
        let t_raw = if bundle.m == 0.0 {
            t_query_max
        } else {
            let ext = (bundle.k * bundle.m / (tail_rate * numerics.tail_tol)).ln() / tail_rate;
            t_query_max + ext.max(0.0)
        };
        let t_quad = ((t_raw / step).ceil() * step).max(step);
        if t_quad > flow.horizon() + 1e-9 {
            return Err(Error::Config(format!(
                "quadrature horizon {t_quad:.4} exceeds the flow window {:.4}; \
                 enlarge the config horizon or lower the query horizon",
                flow.horizon()
            )));
        }
        Ok(ConjugacyEngine {
            q: theorem1.q,
            flow,
            bundle,
            theorem1,
            theorem2,
            t_query_max,
            t_quad,
            step,
            tol_fp: numerics.tol_fixedpoint,
            tail_tol: numerics.tail_tol,
            z_cache: RefCell::new(FifoMap::new(PATH_CACHE_CAP)),
            w_cache: RefCell::new(FifoMap::new(PATH_CACHE_CAP)),
        })
    }

    pub fn flow(&self) -> &FlowEngine {
        &self.flow
    }

    pub fn bundle(&self) -> &ConstantsBundle {
        &self.bundle
    }

    pub fn theorem1(&self) -> &ConditionReport {
        &self.theorem1
    }

    pub fn theorem2(&self) -> Option<&ConditionReport> {
        self.theorem2.as_ref()
    }

    pub fn contraction_q(&self) -> f64 {
        self.q
    }

    /// Quadrature horizon T actually used for the truncated integrals.
    pub fn quad_horizon(&self) -> f64 {
        self.t_quad
    }

    pub fn query_horizon(&self) -> f64 {
        self.t_query_max
    }

    pub fn grid_step(&self) -> f64 {
        self.step
    }

    pub fn tail_tol(&self) -> f64 {
        self.tail_tol
    }

    fn check_query_time(&self, t: f64) -> Result<()> {
        if t < -1e-9 || t > self.t_query_max + 1e-9 {
            return Err(Error::Domain(format!(
                "time {t} outside the query horizon [0, {}]",
                self.t_query_max
            )));
        }
        Ok(())
    }

    fn check_dim(&self, y: &DVector<f64>) -> Result<()> {
        if y.len() != self.flow.dim() {
            return Err(Error::DimensionMismatch(format!(
                "point has dimension {}, system has {}",
                y.len(),
                self.flow.dim()
            )));
        }
        Ok(())
    }

    /// Sample a dense path on the uniform output grid.
    fn sample(&self, dense: &DensePath) -> Result<WeightedPath> {
        let nodes = (self.t_quad / self.step).round() as usize + 1;
        let mut values = Vec::with_capacity(nodes);
        let mut buf = vec![0.0; dense.dim()];
        for i in 0..nodes {
            let t = (i as f64 * self.step).min(self.t_quad);
            dense.eval_into(t, &mut buf);
            values.push(DVector::from_column_slice(&buf));
        }
        WeightedPath::new(self.step, values, self.bundle.b)
    }

    /// Weighted sup distance of two dense paths over the output grid.
    fn grid_distance(&self, a: &DensePath, b: &DensePath) -> f64 {
        let nodes = (self.t_quad / self.step).round() as usize + 1;
        let n = a.dim();
        let mut ba = vec![0.0; n];
        let mut bb = vec![0.0; n];
        let mut worst = 0.0f64;
        for i in 0..nodes {
            let t = (i as f64 * self.step).min(self.t_quad);
            a.eval_into(t, &mut ba);
            b.eval_into(t, &mut bb);
            let d = ba
                .iter()
                .zip(&bb)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            worst = worst.max((-self.bundle.b * t).exp() * d);
        }
        worst
    }

    /// One application of the integral operator to a dense path (`None`
    /// stands for the zero path) around the linear trajectory through
    /// (tau, xi): t ↦ ∫₀ᵀ G(t,s) f(s, x(s,tau,xi) + phi(s)) ds.
    fn gamma_dense(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        phi: Option<&DensePath>,
    ) -> Result<SweepSolution> {
        let n = self.flow.dim();
        let x_traj = self.flow.linear_trajectory(tau, xi, 0.0, self.t_quad)?;
        let mut xbuf = vec![0.0; n];
        let mut pbuf = vec![0.0; n];
        let mut ybuf = vec![0.0; n];
        self.flow.green_sweep(
            |s, out| {
                x_traj.eval_into(s, &mut xbuf);
                if let Some(phi) = phi {
                    phi.eval_into(s, &mut pbuf);
                }
                for i in 0..n {
                    ybuf[i] = xbuf[i] + pbuf[i];
                }
                self.flow.system().eval_f_into(s, &ybuf, out)
            },
            1,
            self.t_quad,
            0.0,
            self.t_quad,
        )
    }

    /// Public single application of the operator to a grid path.
    pub fn apply_gamma(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        phi: &WeightedPath,
    ) -> Result<WeightedPath> {
        self.check_query_time(tau)?;
        self.check_dim(xi)?;
        let n = self.flow.dim();
        if phi.dim() != n {
            return Err(Error::DimensionMismatch(format!(
                "path dimension {} does not match the system dimension {n}",
                phi.dim()
            )));
        }
        if (phi.step() - self.step).abs() > 1e-12 || phi.t_end() < self.t_quad - 1e-9 {
            return Err(Error::Config(format!(
                "path grid (step {}, end {}) must match the engine grid \
                 (step {}, end {})",
                phi.step(),
                phi.t_end(),
                self.step,
                self.t_quad
            )));
        }
        if self.flow.system().is_zero_perturbation() {
            return self.sample(&DensePath::zero(n, self.t_quad));
        }
        let x_traj = self.flow.linear_trajectory(tau, xi, 0.0, self.t_quad)?;
        let mut xbuf = vec![0.0; n];
        let mut pbuf = vec![0.0; n];
        let mut ybuf = vec![0.0; n];
        let sweep = self.flow.green_sweep(
            |s, out| {
                x_traj.eval_into(s, &mut xbuf);
                phi.eval_into(s.min(phi.t_end()), &mut pbuf);
                for i in 0..n {
                    ybuf[i] = xbuf[i] + pbuf[i];
                }
                self.flow.system().eval_f_into(s, &ybuf, out)
            },
            1,
            self.t_quad,
            0.0,
            self.t_quad,
        )?;
        self.sample(&DensePath::swept(1.0, sweep))
    }

    /// Picard iteration from the zero path until the weighted update drops
    /// below tol * (1 - q). Lf = 0 short-circuits after one application (the
    /// operator is then constant in phi); an identically zero perturbation
    /// returns the zero path without integrating.
    pub fn fixed_point_z(&self, tau: f64, xi: &DVector<f64>) -> Result<FixedPointRun> {
        self.check_query_time(tau)?;
        self.check_dim(xi)?;
        let n = self.flow.dim();
        let key = anchor_key(tau, xi);
        if self.flow.system().is_zero_perturbation() {
            let dense = Rc::new(DensePath::zero(n, self.t_quad));
            self.z_cache.borrow_mut().insert(key, dense.clone());
            return Ok(FixedPointRun {
                path: self.sample(&dense)?,
                iterations: 0,
                ratios: Vec::new(),
                final_delta: 0.0,
                dense,
            });
        }
        let lf_zero = self.bundle.lf == 0.0;
        let stop = self.tol_fp * (1.0 - self.q);
        let mut prev = DensePath::zero(n, self.t_quad);
        let mut prev_delta = f64::NAN;
        let mut ratios = Vec::new();
        let mut iterations = 0usize;
        loop {
            iterations += 1;
            let next = DensePath::swept(1.0, self.gamma_dense(tau, xi, Some(&prev))?);
            let delta = self.grid_distance(&next, &prev);
            if prev_delta.is_finite() && prev_delta > 0.0 {
                ratios.push(delta / prev_delta);
            }
            prev = next;
            if lf_zero || delta <= stop {
                let dense = Rc::new(prev);
                self.z_cache.borrow_mut().insert(key, dense.clone());
                return Ok(FixedPointRun {
                    path: self.sample(&dense)?,
                    iterations,
                    ratios,
                    final_delta: delta,
                    dense,
                });
            }
            prev_delta = delta;
            if iterations >= MAX_PICARD {
                return Err(Error::NonConvergence(MAX_PICARD));
            }
        }
    }

    /// Dense fixed point for the anchor (tau, xi), cache-first.
    pub fn z_star(&self, tau: f64, xi: &DVector<f64>) -> Result<Rc<DensePath>> {
        let key = anchor_key(tau, xi);
        if let Some(p) = self.z_cache.borrow().get(&key) {
            return Ok(p.clone());
        }
        Ok(self.fixed_point_z(tau, xi)?.dense)
    }

    /// Dense w*(·;(tau,eta)) = -∫₀ᵀ G(·,s) f(s, y(s,tau,eta)) ds, cache-first.
    pub fn w_star(&self, tau: f64, eta: &DVector<f64>) -> Result<Rc<DensePath>> {
        self.check_query_time(tau)?;
        self.check_dim(eta)?;
        let n = self.flow.dim();
        let key = anchor_key(tau, eta);
        if let Some(p) = self.w_cache.borrow().get(&key) {
            return Ok(p.clone());
        }
        let dense = if self.flow.system().is_zero_perturbation() {
            Rc::new(DensePath::zero(n, self.t_quad))
        } else {
            let y_traj = self.flow.nonlinear_trajectory(tau, eta, 0.0, self.t_quad)?;
            let mut ybuf = vec![0.0; n];
            let sweep = self.flow.green_sweep(
                |s, out| {
                    y_traj.eval_into(s, &mut ybuf);
                    self.flow.system().eval_f_into(s, &ybuf, out)
                },
                1,
                self.t_quad,
                0.0,
                self.t_quad,
            )?;
            Rc::new(DensePath::swept(-1.0, sweep))
        };
        self.w_cache.borrow_mut().insert(key, dense.clone());
        Ok(dense)
    }

    /// Sampled z* path on the output grid.
    pub fn compute_z(&self, tau: f64, xi: &DVector<f64>) -> Result<WeightedPath> {
        let dense = self.z_star(tau, xi)?;
        self.sample(&dense)
    }

    /// Sampled w* path on the output grid.
    pub fn compute_w(&self, tau: f64, eta: &DVector<f64>) -> Result<WeightedPath> {
        let dense = self.w_star(tau, eta)?;
        self.sample(&dense)
    }

    /// w*(t;(tau,eta)) evaluated at a single time. Uses the cached dense
    /// path when present; otherwise runs a sweep with a point-sized output
    /// window, which skips the dense storage of the full path.
    pub fn w_star_at(&self, t: f64, tau: f64, eta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_query_time(t)?;
        self.check_query_time(tau)?;
        self.check_dim(eta)?;
        let n = self.flow.dim();
        let key = anchor_key(tau, eta);
        if let Some(p) = self.w_cache.borrow().get(&key) {
            return Ok(p.eval_vec(t));
        }
        if self.flow.system().is_zero_perturbation() {
            return Ok(DVector::zeros(n));
        }
        let y_traj = self.flow.nonlinear_trajectory(tau, eta, 0.0, self.t_quad)?;
        let mut ybuf = vec![0.0; n];
        let sweep = self.flow.green_sweep(
            |s, out| {
                y_traj.eval_into(s, &mut ybuf);
                self.flow.system().eval_f_into(s, &ybuf, out)
            },
            1,
            self.t_quad,
            t,
            t,
        )?;
        Ok(-sweep.eval_vec(t))
    }

    /// H(t, xi) = xi + z*(t;(t,xi)).
    pub fn map_h(&self, t: f64, xi: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_query_time(t)?;
        self.check_dim(xi)?;
        let z = self.z_star(t, xi)?;
        Ok(xi + z.eval_vec(t))
    }

    /// G(t, eta) = eta + w*(t;(t,eta)).
    pub fn map_g(&self, t: f64, eta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(eta + self.w_star_at(t, t, eta)?)
    }

    /// Alternative form G(s, eta) = Phi(s,0) { y(0,s,eta) + w*(0;(s,eta)) }.
    pub fn map_g_alt(&self, s: f64, eta: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_query_time(s)?;
        self.check_dim(eta)?;
        let y0 = self.flow.solve_nonlinear(s, eta, 0.0)?;
        let w0 = self.w_star_at(0.0, s, eta)?;
        let phi = self.flow.principal_matrix(s)?;
        Ok(phi * (y0 + w0))
    }

    /// ∂G/∂eta(t, eta) = I - Lambda(t, eta) with
    /// Lambda = ∫₀ᵀ G(t,s) ∂₂f(s, y(s,t,eta)) (∂y/∂eta)(s,t,eta) ds.
    /// Returns the Jacobian and the spectral norm of Lambda. Requires the
    /// differentiability margins to pass.
    pub fn jacobian_g(&self, t: f64, eta: &DVector<f64>) -> Result<(DMatrix<f64>, f64)> {
        match &self.theorem2 {
            Some(r) if r.overall => {}
            Some(_) => {
                return Err(Error::Config(
                    "differentiability margins do not pass for this bundle".into(),
                ))
            }
            None => {
                return Err(Error::Config(
                    "differentiability checks need c > 2 in the bundle".into(),
                ))
            }
        }
        self.check_query_time(t)?;
        self.check_dim(eta)?;
        let n = self.flow.dim();
        if self.flow.system().is_zero_perturbation() {
            return Ok((DMatrix::identity(n, n), 0.0));
        }
        let y_traj = self.flow.nonlinear_trajectory(t, eta, 0.0, self.t_quad)?;
        let v_traj = self.flow.variational_flow(t, eta, 0.0, self.t_quad)?;
        let mut ybuf = vec![0.0; n];
        let mut vbuf = vec![0.0; n * n];
        let sweep = self.flow.green_sweep(
            |s, out| {
                y_traj.eval_into(s, &mut ybuf);
                v_traj.eval_into(s, &mut vbuf);
                let d2 = self.flow.d2f(s, &DVector::from_column_slice(&ybuf))?;
                for c in 0..n {
                    for i in 0..n {
                        out[c * n + i] = (0..n).map(|j| d2[(i, j)] * vbuf[c * n + j]).sum();
                    }
                }
                Ok(())
            },
            n,
            self.t_quad,
            t,
            t,
        )?;
        let lambda = sweep.eval_mat(t);
        let norm = spectral_norm(&lambda);
        Ok((DMatrix::identity(n, n) - &lambda, norm))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::load_system;

    const S1: &str = include_str!("../../../configs/s1.json");
    const S2: &str = include_str!("../../../configs/s2.json");
    const ZERO_F: &str = include_str!("../../../configs/zero_f.json");

    fn engine(cfg: &str, t_max: f64) -> ConjugacyEngine {
        let sys = load_system(cfg).unwrap();
        let bundle = {
            let mut b = ConstantsBundle {
                k: 1.0,
                alpha: 1.0,
                mu: 0.0,
                k0: 1.0,
                a: 1.0,
                eps: 0.0,
                lf: 0.0,
                theta: 0.5,
                m: 0.0,
                delta: 0.0,
                b: 0.7,
                c: 4.0,
            };
            b.apply_patch(&sys.constants);
            b
        };
        ConjugacyEngine::new(FlowEngine::new(sys), bundle, t_max).unwrap()
    }

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    #[test]
    fn zero_perturbation_maps_are_identities() {
        let eng = engine(ZERO_F, 8.0);
        assert_eq!(eng.quad_horizon(), 8.0);
        let eta = v(&[1.0, -0.5]);
        let run = eng.fixed_point_z(2.0, &eta).unwrap();
        assert_eq!(run.iterations, 0);
        assert_eq!(run.path.weighted_norm(), 0.0);
        assert_eq!(eng.map_h(2.0, &eta).unwrap(), eta);
        assert_eq!(eng.map_g(2.0, &eta).unwrap(), eta);
        let alt = eng.map_g_alt(2.0, &eta).unwrap();
        assert!((alt - &eta).norm() < 1e-9, "alt form drifted");
        let (jac, lam) = eng.jacobian_g(2.0, &eta).unwrap();
        assert_eq!(lam, 0.0);
        assert_eq!(jac, DMatrix::identity(2, 2));
    }

    #[test]
    fn quadrature_horizon_respects_tail_budget() {
        let eng = engine(S1, 8.0);
        // K M / tail_tol = 1e8, rate 1: extension ln(1e8) = 18.42...
        let want = 8.0 + (1e8f64).ln();
        assert!(eng.quad_horizon() >= want - 1e-9);
        assert!(eng.quad_horizon() <= want + 0.011);
        // A query horizon that pushes T past the flow window must fail.
        let sys = load_system(S1).unwrap();
        let mut b = *engine(S1, 1.0).bundle();
        b.m = 0.1;
        assert!(ConjugacyEngine::new(FlowEngine::new(sys), b, 20.0).is_err());
    }

    #[test]
    fn failing_margins_block_construction() {
        let sys = load_system(S1).unwrap();
        let mut b = *engine(S1, 1.0).bundle();
        b.b = 1.5; // alpha - mu + theta - b = 0
        assert!(matches!(
            ConjugacyEngine::new(FlowEngine::new(sys), b, 8.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gamma_of_zero_obeys_weighted_bound() {
        // |Gamma 0|_A <= K M/(alpha+delta+mu) + K M/(alpha-delta-mu) = 0.2.
        let eng = engine(S1, 8.0);
        let phi0 = WeightedPath::zeros(1, eng.grid_step(), eng.quad_horizon(), 0.7).unwrap();
        let g1 = eng.apply_gamma(0.0, &v(&[1.0]), &phi0).unwrap();
        let norm = g1.weighted_norm();
        // Hand value: sup_t e^{-0.7 t} * 0.1 e^{-t} int_0^t e^{s/2} sin(e^{-s}) ds,
        // peaking near t = 0.5 at about 0.0170.
        assert!(norm <= 0.2 + 1e-9, "weighted norm {norm}");
        assert!((norm - 0.0170).abs() < 2e-3, "image norm {norm}");
        // Equilibrium anchor: f(s, 0) = 0, so the image is the zero path.
        let g0 = eng.apply_gamma(0.0, &v(&[0.0]), &phi0).unwrap();
        assert_eq!(g0.weighted_norm(), 0.0);
    }

    #[test]
    fn picard_contraction_matches_theory() {
        let eng = engine(S1, 8.0);
        let run = eng.fixed_point_z(0.0, &v(&[1.0])).unwrap();
        assert!(run.iterations <= 15, "{} iterations", run.iterations);
        assert!(!run.ratios.is_empty());
        for r in &run.ratios {
            assert!(*r <= eng.contraction_q() + 0.05, "ratio {r}");
        }
        assert!(run.final_delta <= 1e-10 * (1.0 - eng.contraction_q()));
        assert!(run.path.weighted_norm() <= 0.2 + 1e-6);
    }

    #[test]
    fn fixed_point_is_flow_invariant() {
        // z*(t;(tau,xi)) = z*(t;(r, x(r,tau,xi))) for any re-anchoring r.
        let eng = engine(S1, 8.0);
        let xi = v(&[1.0]);
        let z1 = eng.z_star(0.0, &xi).unwrap();
        for r in [0.5, 2.0, 5.0] {
            let x_traj = eng.flow().linear_trajectory(0.0, &xi, 0.0, r).unwrap();
            let xr = x_traj.eval_vec(r);
            let z2 = eng.z_star(r, &xr).unwrap();
            for t in [0.0, 1.0, 3.0, 7.5] {
                let d = (z1.eval_vec(t) - z2.eval_vec(t)).norm();
                assert!(d <= 1e-6, "invariance residual {d} at t={t}, r={r}");
            }
        }
    }

    #[test]
    fn fixed_point_satisfies_the_integral_equation_ivp() {
        // The dense fixed point solves z' = A(t) z + f(t, x(t)+z) segment by
        // segment within integrator accuracy.
        let eng = engine(S2, 8.0);
        let xi = v(&[1.0, 0.5]);
        let z = eng.z_star(0.0, &xi).unwrap();
        let x_traj = eng.flow().linear_trajectory(0.0, &xi, 0.0, 8.0).unwrap();
        let sys = eng.flow().system();
        let opts = crate::ode::OdeOptions::new(1e-12, 1e-13);
        for k in 0..8 {
            let t0 = k as f64;
            let y0 = z.eval_vec(t0);
            let sol = crate::ode::integrate(
                |t: f64, y: &[f64], dy: &mut [f64]| {
                    let mut a = vec![0.0; 4];
                    sys.eval_a_into(t, &mut a)?;
                    let x = x_traj.eval_vec(t);
                    let arg = [x[0] + y[0], x[1] + y[1]];
                    let mut fv = [0.0; 2];
                    sys.eval_f_into(t, &arg, &mut fv)?;
                    dy[0] = a[0] * y[0] + a[2] * y[1] + fv[0];
                    dy[1] = a[1] * y[0] + a[3] * y[1] + fv[1];
                    Ok(())
                },
                t0,
                y0.as_slice(),
                t0 + 1.0,
                &opts,
                None,
            )
            .unwrap();
            let want = z.eval_vec(t0 + 1.0);
            let got = DVector::from_column_slice(sol.y_end());
            assert!(
                (got - want).norm() < 1e-7,
                "segment [{t0}, {}] drifted",
                t0 + 1.0
            );
        }
    }

    #[test]
    fn round_trips_invert_each_other() {
        let eng = engine(S2, 8.0);
        let xi = v(&[1.0, 0.5]);
        let h = eng.map_h(1.0, &xi).unwrap();
        let back = eng.map_g(1.0, &h).unwrap();
        assert!((back - &xi).norm() <= 1e-6);
        let eta = v(&[-0.75, 1.25]);
        let g = eng.map_g(1.0, &eta).unwrap();
        let fwd = eng.map_h(1.0, &g).unwrap();
        assert!((fwd - &eta).norm() <= 1e-6);
    }

    #[test]
    fn conjugacy_identity_holds_along_trajectories() {
        // H(t, x(t,tau,xi)) = y(t, tau, H(tau,xi)).
        let eng = engine(S1, 8.0);
        let xi = v(&[1.5]);
        let tau = 1.0;
        let h_tau = eng.map_h(tau, &xi).unwrap();
        for t in [0.0, 2.0, 6.0] {
            let x_t = eng
                .flow()
                .linear_trajectory(tau, &xi, 0.0, 8.0)
                .unwrap()
                .eval_vec(t);
            let lhs = eng.map_h(t, &x_t).unwrap();
            let rhs = eng.flow().solve_nonlinear(tau, &h_tau, t).unwrap();
            assert!((lhs - rhs).norm() <= 1e-6, "residual at t={t}");
        }
    }

    #[test]
    fn alternative_form_of_g_agrees() {
        let eng2 = engine(S2, 8.0);
        let eta = v(&[1.0, 0.5]);
        let a = eng2.map_g(1.0, &eta).unwrap();
        let b = eng2.map_g_alt(1.0, &eta).unwrap();
        assert!((a - b).norm() <= 1e-6);

        let eng1 = engine(S1, 8.0);
        let eta = v(&[1.0]);
        let a = eng1.map_g(2.0, &eta).unwrap();
        let b = eng1.map_g_alt(2.0, &eta).unwrap();
        assert!((a - b).norm() <= 1e-6);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let eng = engine(S1, 8.0);
        let eta = v(&[0.0]);
        let (jac, lam_norm) = eng.jacobian_g(2.0, &eta).unwrap();
        // Lambda bound (1/c)(e^{(-alpha+a+eps) t} + 1) = 0.5 at every t for
        // this bundle.
        assert!(lam_norm <= 0.5 + 1e-6, "norm {lam_norm}");
        assert!(lam_norm > 0.05, "implausibly small {lam_norm}");
        let fd = {
            let d = 1e-5;
            let gp = eng.map_g(2.0, &v(&[d])).unwrap();
            let gm = eng.map_g(2.0, &v(&[-d])).unwrap();
            (gp[0] - gm[0]) / (2.0 * d)
        };
        assert!(
            (jac[(0, 0)] - fd).abs() <= 1e-4,
            "jac {} fd {fd}",
            jac[(0, 0)]
        );
        let det = jac[(0, 0)];
        assert!(det.abs() >= 1e-6);
    }

    #[test]
    fn jacobian_vanishes_at_zero_when_projector_is_identity() {
        // P0 = I leaves no unstable branch: Lambda(0, eta) integrates Q = 0
        // over (0, T] and an empty stable interval.
        let eng = engine(S1, 8.0);
        let (jac, lam) = eng.jacobian_g(0.0, &v(&[0.7])).unwrap();
        assert_eq!(lam, 0.0);
        assert_eq!(jac[(0, 0)], 1.0);
    }

    #[test]
    fn jacobian_needs_passing_differentiability_margins() {
        let sys = load_system(S1).unwrap();
        let mut b = *engine(S1, 1.0).bundle();
        b.c = 5.0; // jacobian_contraction fails: 0.2443 > 1/5
        let eng = ConjugacyEngine::new(FlowEngine::new(sys), b, 8.0).unwrap();
        assert!(eng.jacobian_g(1.0, &v(&[0.5])).is_err());
    }

    #[test]
    fn caches_return_identical_objects() {
        let eng = engine(S1, 8.0);
        let xi = v(&[1.0]);
        let z1 = eng.z_star(0.0, &xi).unwrap();
        let z2 = eng.z_star(0.0, &xi).unwrap();
        assert!(Rc::ptr_eq(&z1, &z2));
        let w1 = eng.w_star(0.0, &xi).unwrap();
        let w2 = eng.w_star(0.0, &xi).unwrap();
        assert!(Rc::ptr_eq(&w1, &w2));
        // Point queries agree with the cached dense path.
        let at = eng.w_star_at(3.0, 0.0, &xi).unwrap();
        assert!((at - w1.eval_vec(3.0)).norm() < 1e-12);
    }
}
