//! Evolution operators for the linear part, nonlinear and variational flows,
//! the Green kernel, and adaptive sweeps that evaluate Green-kernel integrals
//! as a pair of auxiliary initial-value problems.
//!
//! The engine is single-threaded by design: all caches live in `RefCell`s and
//! results are deterministic for a fixed call sequence.

use crate::error::{Error, Result};
use crate::linalg::{column_space_basis, orthonormalize_columns, spectral_norm, state_to_mat};
use crate::ode::{integrate, DenseSolution, OdeOptions};
use crate::system::SystemDefinition;
use nalgebra::{DMatrix, DVector};
use std::cell::RefCell;
use std::collections::{HashMap, VecDeque};
use std::rc::Rc;

/// Nonlinear trajectories above this magnitude abort as blown up.
const NONLINEAR_GUARD: f64 = 1e15;
/// Linear flows may grow like e^{a t} legitimately; only guard against
/// genuine overflow.
const LINEAR_GUARD: f64 = 1e250;
/// Transition-matrix entries past this trigger a conditioning warning.
const OVERFLOW_WARN: f64 = 1e12;
const CACHE_CAP: usize = 256;

fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64], n: usize) {
    out[..n].fill(0.0);
    for j in 0..n {
        let xj = x[j];
        let col = &a[j * n..(j + 1) * n];
        for i in 0..n {
            out[i] += col[i] * xj;
        }
    }
}

/// A dense flow anchored at `anchor_t`, covering a finite span around the
/// anchor. The state is a flat vector: length n for trajectories, n*m
/// column-major for matrix flows.
pub struct Trajectory {
    anchor_t: f64,
    anchor_y: Vec<f64>,
    fwd: Option<DenseSolution<f64>>,
    bwd: Option<DenseSolution<f64>>,
}

impl Trajectory {
    pub fn anchor_t(&self) -> f64 {
        self.anchor_t
    }

    pub fn anchor_y(&self) -> &[f64] {
        &self.anchor_y
    }

    pub fn state_len(&self) -> usize {
        self.anchor_y.len()
    }

    pub fn lo(&self) -> f64 {
        self.bwd.as_ref().map_or(self.anchor_t, |s| s.t_end())
    }

    pub fn hi(&self) -> f64 {
        self.fwd.as_ref().map_or(self.anchor_t, |s| s.t_end())
    }

    pub fn covers(&self, lo: f64, hi: f64) -> bool {
        self.lo() <= lo + 1e-9 && hi <= self.hi() + 1e-9
    }

    pub fn eval_into(&self, s: f64, out: &mut [f64]) {
        if s == self.anchor_t {
            out.copy_from_slice(&self.anchor_y);
        } else if s > self.anchor_t {
            self.fwd
                .as_ref()
                .expect("trajectory evaluated beyond built span")
                .eval_into(s, out);
        } else {
            self.bwd
                .as_ref()
                .expect("trajectory evaluated before built span")
                .eval_into(s, out);
        }
    }

    pub fn eval_vec(&self, s: f64) -> DVector<f64> {
        let mut out = vec![0.0; self.state_len()];
        self.eval_into(s, &mut out);
        DVector::from_vec(out)
    }
}

/// A forward flow stored as consecutive dense chunks. Basis flows are
/// renormalized only at chunk boundaries, so every stored interpolant is an
/// unmodified integrator product and interior evaluations keep full accuracy.
struct PiecewiseFlow {
    segs: Vec<DenseSolution<f64>>,
}

impl PiecewiseFlow {
    fn eval(&self, t: f64) -> Vec<f64> {
        let idx = self
            .segs
            .partition_point(|seg| seg.t_end() < t)
            .min(self.segs.len() - 1);
        self.segs[idx].eval(t)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
enum TrajKind {
    Nonlinear,
    Linear,
    Variational,
}

#[derive(Clone, PartialEq, Eq, Hash, Debug)]
struct TrajKey {
    kind: TrajKind,
    t_bits: u64,
    y_bits: Vec<u64>,
}

pub(crate) struct FifoMap<K, V> {
    map: HashMap<K, V>,
    order: VecDeque<K>,
    cap: usize,
}

impl<K: std::hash::Hash + Eq + Clone, V> FifoMap<K, V> {
    pub(crate) fn new(cap: usize) -> Self {
        FifoMap {
            map: HashMap::new(),
            order: VecDeque::new(),
            cap,
        }
    }

    pub(crate) fn get(&self, k: &K) -> Option<&V> {
        self.map.get(k)
    }

    pub(crate) fn insert(&mut self, k: K, v: V) {
        if self.map.insert(k.clone(), v).is_none() {
            self.order.push_back(k);
            if self.order.len() > self.cap {
                if let Some(old) = self.order.pop_front() {
                    self.map.remove(&old);
                }
            }
        }
    }
}

/// Norms of the factored transition operator for one (t, s) pair:
/// `stable` = |Phi(t,s) P(s)|, `unstable` = |Phi(t,s) Q(s)|,
/// `full` = |Phi(t,s)| (spectral norms).
#[derive(Debug, Clone, Copy)]
pub struct PairNorms {
    pub t: f64,
    pub s: f64,
    pub stable: f64,
    pub unstable: f64,
    pub full: f64,
}

/// The integral I(t) = ∫₀ᵀ G(t,s) g(s) ds represented as the sum of two
/// auxiliary flows: a forward one carrying the stable half of the kernel and
/// a backward one carrying the unstable half. Valid for t in
/// [out_lo, out_hi].
pub struct SweepSolution {
    n: usize,
    m: usize,
    out_lo: f64,
    out_hi: f64,
    fwd: Option<DenseSolution<f64>>,
    bwd: Option<DenseSolution<f64>>,
}

impl SweepSolution {
    pub fn state_len(&self) -> usize {
        self.n * self.m
    }

    pub fn out_lo(&self) -> f64 {
        self.out_lo
    }

    pub fn out_hi(&self) -> f64 {
        self.out_hi
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        assert!(
            t >= self.out_lo - 1e-9 && t <= self.out_hi + 1e-9,
            "sweep evaluated outside [{}, {}]",
            self.out_lo,
            self.out_hi
        );
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let mut tmp = vec![0.0; self.state_len()];
        if let Some(fwd) = &self.fwd {
            fwd.eval_into(t, &mut tmp);
            for i in 0..out.len() {
                out[i] += tmp[i];
            }
        }
        if let Some(bwd) = &self.bwd {
            bwd.eval_into(t, &mut tmp);
            for i in 0..out.len() {
                out[i] += tmp[i];
            }
        }
    }

    pub fn eval_vec(&self, t: f64) -> DVector<f64> {
        let mut out = vec![0.0; self.state_len()];
        self.eval_into(t, &mut out);
        DVector::from_vec(out)
    }

    pub fn eval_mat(&self, t: f64) -> DMatrix<f64> {
        let mut out = vec![0.0; self.state_len()];
        self.eval_into(t, &mut out);
        state_to_mat(self.n, self.m, &out)
    }
}

pub struct FlowEngine {
    sys: SystemDefinition,
    n: usize,
    rtol: f64,
    atol: f64,
    stable_rank: usize,
    const_p: Option<DMatrix<f64>>,
    qu0: DMatrix<f64>,
    qv0: DMatrix<f64>,
    bases_ready: std::cell::Cell<bool>,
    chunk_cache: std::cell::Cell<f64>,
    /// Adjoint flow W' = -A(t)^T W of a basis of range(P0)^perp; the stable
    /// subspace at time t is span(W(t))^perp. Built only for 0 < rank < n.
    adj_flow: RefCell<Option<Rc<PiecewiseFlow>>>,
    /// Forward flow of a basis of range(I - P0); spans the unstable subspace.
    qv_flow: RefCell<Option<Rc<PiecewiseFlow>>>,
    x_flow: RefCell<Option<Rc<DenseSolution<f64>>>>,
    pair_cache: PairCache,
    traj_cache: RefCell<FifoMap<TrajKey, Rc<Trajectory>>>,
}

type PairCache = RefCell<FifoMap<(u64, u64), Rc<DMatrix<f64>>>>;

impl FlowEngine {
    pub fn new(sys: SystemDefinition) -> Self {
        let n = sys.dim;
        let rtol = sys.numerics.tol_ode;
        let atol = rtol / 10.0;
        let qu0 = column_space_basis(&sys.p0, 1e-12);
        let complement = DMatrix::identity(n, n) - &sys.p0;
        let qv0 = column_space_basis(&complement, 1e-12);
        let r = qu0.ncols();
        assert_eq!(
            r + qv0.ncols(),
            n,
            "projector ranges do not split the state space"
        );
        let p0_diag_01 = (0..n).all(|i| {
            (0..n).all(|j| {
                let v = sys.p0[(i, j)];
                if i == j {
                    v.abs() < 1e-14 || (v - 1.0).abs() < 1e-14
                } else {
                    v.abs() < 1e-14
                }
            })
        });
        let const_p = if r == 0 || r == n || (sys.a_is_diagonal() && p0_diag_01) {
            Some(sys.p0.clone())
        } else {
            None
        };
        FlowEngine {
            n,
            rtol,
            atol,
            stable_rank: r,
            const_p,
            qu0,
            qv0,
            bases_ready: std::cell::Cell::new(false),
            chunk_cache: std::cell::Cell::new(0.0),
            adj_flow: RefCell::new(None),
            qv_flow: RefCell::new(None),
            x_flow: RefCell::new(None),
            pair_cache: RefCell::new(FifoMap::new(4096)),
            traj_cache: RefCell::new(FifoMap::new(CACHE_CAP)),
            sys,
        }
    }

    pub fn system(&self) -> &SystemDefinition {
        &self.sys
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.sys.horizon
    }

    pub fn stable_rank(&self) -> usize {
        self.stable_rank
    }

    pub fn ode_rtol(&self) -> f64 {
        self.rtol
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t >= -1e-9 && t <= self.sys.horizon + 1e-9 {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "time {t} outside [0, {}]",
                self.sys.horizon
            )))
        }
    }

    fn nonlinear_opts(&self) -> OdeOptions<f64> {
        OdeOptions::new(self.rtol, self.atol).with_blowup(NONLINEAR_GUARD)
    }

    fn linear_opts(&self) -> OdeOptions<f64> {
        OdeOptions::new(self.rtol, self.atol).with_blowup(LINEAR_GUARD)
    }

    fn sweep_opts(&self) -> OdeOptions<f64> {
        OdeOptions::new(self.rtol * 10.0, self.atol * 10.0)
    }

    fn linear_matrix_rhs(&self) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + '_ {
        let n = self.n;
        let mut a_buf = vec![0.0; n * n];
        move |t, y, dy| {
            self.sys.eval_a_into(t, &mut a_buf)?;
            let cols = y.len() / n;
            for c in 0..cols {
                mat_vec(
                    &a_buf,
                    &y[c * n..(c + 1) * n],
                    &mut dy[c * n..(c + 1) * n],
                    n,
                );
            }
            Ok(())
        }
    }

    fn adjoint_matrix_rhs(&self) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + '_ {
        let n = self.n;
        let mut a_buf = vec![0.0; n * n];
        move |t, y, dy| {
            self.sys.eval_a_into(t, &mut a_buf)?;
            let cols = y.len() / n;
            for c in 0..cols {
                let yc = &y[c * n..(c + 1) * n];
                let dc = &mut dy[c * n..(c + 1) * n];
                for i in 0..n {
                    dc[i] = -(0..n).map(|j| a_buf[i * n + j] * yc[j]).sum::<f64>();
                }
            }
            Ok(())
        }
    }

    fn nonlinear_rhs(&self) -> impl FnMut(f64, &[f64], &mut [f64]) -> Result<()> + '_ {
        let n = self.n;
        let mut a_buf = vec![0.0; n * n];
        let mut f_buf = vec![0.0; n];
        move |t, y, dy| {
            self.sys.eval_a_into(t, &mut a_buf)?;
            mat_vec(&a_buf, y, dy, n);
            self.sys.eval_f_into(t, y, &mut f_buf)?;
            for i in 0..n {
                dy[i] += f_buf[i];
            }
            Ok(())
        }
    }

    /// Jacobian of the perturbation in the state argument, by central
    /// differences with per-component step 1e-6 * max(1, |y_j|).
    pub fn d2f(&self, t: f64, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.n;
        let mut work = D2fWork::new(n);
        let mut out = vec![0.0; n * n];
        self.d2f_into(t, y.as_slice(), &mut work, &mut out)?;
        Ok(state_to_mat(n, n, &out))
    }

    fn d2f_into(&self, t: f64, y: &[f64], work: &mut D2fWork, out: &mut [f64]) -> Result<()> {
        let n = self.n;
        for j in 0..n {
            let h = 1e-6 * y[j].abs().max(1.0);
            work.yp.copy_from_slice(y);
            work.yp[j] = y[j] + h;
            self.sys.eval_f_into(t, &work.yp, &mut work.fp)?;
            work.yp[j] = y[j] - h;
            self.sys.eval_f_into(t, &work.yp, &mut work.fm)?;
            let inv = 0.5 / h;
            for i in 0..n {
                out[j * n + i] = (work.fp[i] - work.fm[i]) * inv;
            }
        }
        Ok(())
    }

    /// Phi(t, s): solve the matrix initial value problem from s to t.
    pub fn transition_matrix(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        self.check_time(s)?;
        let n = self.n;
        if t == s {
            return Ok(DMatrix::identity(n, n));
        }
        let key = (t.to_bits(), s.to_bits());
        if let Some(m) = self.pair_cache.borrow().get(&key) {
            return Ok(m.as_ref().clone());
        }
        let id: Vec<f64> = DMatrix::<f64>::identity(n, n).as_slice().to_vec();
        let sol = integrate(
            self.linear_matrix_rhs(),
            s,
            &id,
            t,
            &self.linear_opts(),
            None,
        )?;
        let m = state_to_mat(n, n, sol.y_end());
        let peak = m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        if peak > OVERFLOW_WARN {
            log::warn!("transition matrix ({t}, {s}) has entries up to {peak:.3e}");
        }
        self.pair_cache.borrow_mut().insert(key, Rc::new(m.clone()));
        Ok(m)
    }

    /// Chunk length keeping the within-chunk growth spread of a linear flow
    /// around e^3, so boundary renormalization never fights conditioning.
    fn basis_chunk(&self) -> Result<f64> {
        let cached = self.chunk_cache.get();
        if cached > 0.0 {
            return Ok(cached);
        }
        let mut sup = 0.0f64;
        let mut buf = vec![0.0; self.n * self.n];
        for i in 0..=200 {
            let t = self.sys.horizon * i as f64 / 200.0;
            self.sys.eval_a_into(t, &mut buf)?;
            let m = state_to_mat(self.n, self.n, &buf);
            sup = sup.max(spectral_norm(&m));
        }
        let chunk = (3.0 / sup.max(1.0)).clamp(0.05, 2.0);
        self.chunk_cache.set(chunk);
        Ok(chunk)
    }

    fn build_piecewise(&self, init: &DMatrix<f64>, adjoint: bool) -> Result<Rc<PiecewiseFlow>> {
        let n = self.n;
        let h = self.sys.horizon;
        let chunk = self.basis_chunk()?;
        let mut state: Vec<f64> = init.as_slice().to_vec();
        let mut segs = Vec::new();
        let mut t = 0.0f64;
        while t < h - 1e-12 {
            let t_next = (t + chunk).min(h);
            let sol = if adjoint {
                integrate(
                    self.adjoint_matrix_rhs(),
                    t,
                    &state,
                    t_next,
                    &self.linear_opts(),
                    None,
                )?
            } else {
                integrate(
                    self.linear_matrix_rhs(),
                    t,
                    &state,
                    t_next,
                    &self.linear_opts(),
                    None,
                )?
            };
            state = sol.y_end().to_vec();
            orthonormalize_columns(&mut state, n);
            segs.push(sol);
            t = t_next;
        }
        Ok(Rc::new(PiecewiseFlow { segs }))
    }

    fn ensure_basis_flows(&self) -> Result<()> {
        if self.bases_ready.get() {
            return Ok(());
        }
        let n = self.n;
        let r = self.stable_rank;
        if r > 0 && r < n {
            let perp = DMatrix::identity(n, n) - &self.qu0 * self.qu0.transpose();
            let w0 = column_space_basis(&perp, 1e-9);
            assert_eq!(w0.ncols(), n - r, "complement basis has wrong rank");
            *self.adj_flow.borrow_mut() = Some(self.build_piecewise(&w0, true)?);
        }
        if r < n {
            *self.qv_flow.borrow_mut() = Some(self.build_piecewise(&self.qv0.clone(), false)?);
        }
        self.bases_ready.set(true);
        Ok(())
    }

    /// Columns spanning the stable and unstable subspaces at time s, packed
    /// as one n x n matrix [basis_u | basis_v]. The stable block is the
    /// orthogonal complement of the adjoint flow, which is the propagation
    /// direction whose errors decay instead of compounding.
    fn basis_matrix_at(&self, s: f64) -> Result<DMatrix<f64>> {
        self.ensure_basis_flows()?;
        let n = self.n;
        let r = self.stable_rank;
        let mut m = DMatrix::zeros(n, n);
        if r == n {
            for i in 0..n {
                m[(i, i)] = 1.0;
            }
            return Ok(m);
        }
        if r > 0 {
            let adj = self.adj_flow.borrow().as_ref().unwrap().clone();
            let mut vals = adj.eval(s);
            orthonormalize_columns(&mut vals, n);
            let w = state_to_mat(n, n - r, &vals);
            let gram = DMatrix::identity(n, n) - &w * w.transpose();
            let qu = column_space_basis(&gram, 1e-6);
            assert_eq!(qu.ncols(), r, "stable complement lost rank at s = {s}");
            for c in 0..r {
                for i in 0..n {
                    m[(i, c)] = qu[(i, c)];
                }
            }
        }
        let qv = self.qv_flow.borrow().as_ref().unwrap().clone();
        let vals = qv.eval(s);
        for c in 0..(n - r) {
            for i in 0..n {
                m[(i, r + c)] = vals[c * n + i];
            }
        }
        Ok(m)
    }

    fn split_inverse(&self, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let n = self.n;
        let r = self.stable_rank;
        let minv = m
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::Integration("subspace basis matrix is singular".into()))?;
        Ok((
            minv.rows(0, r).into_owned(),
            minv.rows(r, n - r).into_owned(),
        ))
    }

    /// Projector P(t) onto the stable subspace along the unstable one.
    pub fn projector_at(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        if let Some(p) = &self.const_p {
            return Ok(p.clone());
        }
        let m = self.basis_matrix_at(t)?;
        let (cu, _) = self.split_inverse(&m)?;
        Ok(m.columns(0, self.stable_rank) * cu)
    }

    pub fn complementary_projector_at(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(DMatrix::identity(self.n, self.n) - self.projector_at(t)?)
    }

    /// Propagate `init` from `from` to `to` under the linear flow, in chunks
    /// with per-column renormalization at chunk boundaries (the flow is
    /// linear, so column rescaling commutes with it). This keeps every state
    /// component O(1) relative to its column, preserving relative accuracy
    /// down to magnitudes like e^{-100} that a plain absolute tolerance
    /// would destroy. With `stable_side` set, columns are also reprojected
    /// onto the stable (resp. unstable) subspace after every accepted step,
    /// stopping complementary error growth; only endpoints are read, so the
    /// hook never pollutes interpolants.
    fn propagate_matrix(
        &self,
        from: f64,
        init: &DMatrix<f64>,
        to: f64,
        stable_side: Option<bool>,
    ) -> Result<DMatrix<f64>> {
        let n = init.nrows();
        let cols = init.ncols();
        if from == to || cols == 0 {
            return Ok(init.clone());
        }
        let chunk = self.basis_chunk()?;
        let konst = match stable_side {
            Some(_) => self.projector_pair()?,
            None => None,
        };
        let mut state: Vec<f64> = init.as_slice().to_vec();
        let mut logs = vec![0.0f64; cols];
        let dir = if to > from { 1.0 } else { -1.0 };
        let mut t = from;
        while (to - t) * dir > 1e-13 {
            let t_next = if dir > 0.0 {
                (t + chunk).min(to)
            } else {
                (t - chunk).max(to)
            };
            let sol = match stable_side {
                None => integrate(
                    self.linear_matrix_rhs(),
                    t,
                    &state,
                    t_next,
                    &self.linear_opts(),
                    None,
                )?,
                Some(side) => {
                    let mut hook =
                        |u: f64, y: &mut [f64]| self.apply_projector(&konst, side, u, y, cols);
                    integrate(
                        self.linear_matrix_rhs(),
                        t,
                        &state,
                        t_next,
                        &self.linear_opts(),
                        Some(&mut hook),
                    )?
                }
            };
            state = sol.y_end().to_vec();
            for c in 0..cols {
                let col = &mut state[c * n..(c + 1) * n];
                let nrm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 1e-300 {
                    for v in col.iter_mut() {
                        *v /= nrm;
                    }
                    logs[c] += nrm.ln();
                }
            }
            t = t_next;
        }
        for l in &logs {
            if *l > 700.0 {
                return Err(Error::Integration(format!(
                    "propagated column magnitude e^{l:.1} overflows"
                )));
            }
        }
        let mut out = DMatrix::zeros(n, cols);
        for c in 0..cols {
            let scale = logs[c].exp();
            for i in 0..n {
                out[(i, c)] = state[c * n + i] * scale;
            }
        }
        Ok(out)
    }

    /// Green kernel G(t,s): Phi(t,s)P(s) for t >= s, -Phi(t,s)Q(s) for t < s.
    /// Both branches are evaluated through the subspace factorization, so no
    /// full transition matrix with mixed growth rates is ever formed.
    pub fn green(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        self.check_time(s)?;
        let n = self.n;
        let r = self.stable_rank;
        let m = self.basis_matrix_at(s)?;
        let (cu, cv) = self.split_inverse(&m)?;
        if t >= s {
            if r == 0 {
                return Ok(DMatrix::zeros(n, n));
            }
            let w = self.propagate_matrix(s, &m.columns(0, r).into_owned(), t, Some(true))?;
            Ok(w * cu)
        } else {
            if r == n {
                return Ok(DMatrix::zeros(n, n));
            }
            let w = self.propagate_matrix(s, &m.columns(r, n - r).into_owned(), t, Some(false))?;
            Ok(-(w * cv))
        }
    }

    /// Spectral norms of Phi(t,s)P(s), Phi(t,s)Q(s), Phi(t,s) for each pair,
    /// evaluated by propagating the subspace bases from s to t.
    pub fn pair_norms(&self, pairs: &[(f64, f64)]) -> Result<Vec<PairNorms>> {
        let n = self.n;
        let r = self.stable_rank;
        let mut out = Vec::with_capacity(pairs.len());
        for &(t, s) in pairs {
            self.check_time(t)?;
            self.check_time(s)?;
            let m = self.basis_matrix_at(s)?;
            let (cu, cv) = self.split_inverse(&m)?;
            let wu = self.propagate_matrix(s, &m.columns(0, r).into_owned(), t, Some(true))?;
            let wv = self.propagate_matrix(s, &m.columns(r, n - r).into_owned(), t, Some(false))?;
            let su = wu * cu;
            let sv = wv * cv;
            out.push(PairNorms {
                t,
                s,
                stable: spectral_norm(&su),
                unstable: spectral_norm(&sv),
                full: spectral_norm(&(su + sv)),
            });
        }
        Ok(out)
    }

    /// Phi(t, 0) from the cached fundamental solution on [0, horizon].
    pub fn principal_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        self.check_time(t)?;
        if self.x_flow.borrow().is_none() {
            let n = self.n;
            let id: Vec<f64> = DMatrix::<f64>::identity(n, n).as_slice().to_vec();
            let sol = integrate(
                self.linear_matrix_rhs(),
                0.0,
                &id,
                self.sys.horizon,
                &self.linear_opts(),
                None,
            )?;
            *self.x_flow.borrow_mut() = Some(Rc::new(sol));
        }
        let sol = self.x_flow.borrow().as_ref().unwrap().clone();
        Ok(state_to_mat(self.n, self.n, &sol.eval(t)))
    }

    fn trajectory(
        &self,
        kind: TrajKind,
        t0: f64,
        y0: &[f64],
        lo: f64,
        hi: f64,
    ) -> Result<Rc<Trajectory>> {
        let lo = lo.min(t0);
        let hi = hi.max(t0);
        self.check_time(lo)?;
        self.check_time(hi)?;
        let key = TrajKey {
            kind,
            t_bits: t0.to_bits(),
            y_bits: y0.iter().map(|v| v.to_bits()).collect(),
        };
        let mut span = (lo, hi);
        if let Some(tr) = self.traj_cache.borrow().get(&key) {
            if tr.covers(lo, hi) {
                return Ok(tr.clone());
            }
            span = (lo.min(tr.lo()), hi.max(tr.hi()));
        }
        let tr = Rc::new(self.build_trajectory(kind, t0, y0, span.0, span.1)?);
        self.traj_cache.borrow_mut().insert(key, tr.clone());
        Ok(tr)
    }

    fn build_trajectory(
        &self,
        kind: TrajKind,
        t0: f64,
        y0: &[f64],
        lo: f64,
        hi: f64,
    ) -> Result<Trajectory> {
        let run = |to: f64| -> Result<Option<DenseSolution<f64>>> {
            if (to - t0).abs() < 1e-13 {
                return Ok(None);
            }
            let sol = match kind {
                TrajKind::Nonlinear => integrate(
                    self.nonlinear_rhs(),
                    t0,
                    y0,
                    to,
                    &self.nonlinear_opts(),
                    None,
                )?,
                TrajKind::Linear => integrate(
                    self.linear_matrix_rhs(),
                    t0,
                    y0,
                    to,
                    &self.linear_opts(),
                    None,
                )?,
                TrajKind::Variational => {
                    let base =
                        self.nonlinear_trajectory(t0, &DVector::from_column_slice(y0), lo, hi)?;
                    let n = self.n;
                    let mut a_buf = vec![0.0; n * n];
                    let mut j_buf = vec![0.0; n * n];
                    let mut tot = vec![0.0; n * n];
                    let mut y_buf = vec![0.0; n];
                    let mut work = D2fWork::new(n);
                    let id: Vec<f64> = DMatrix::<f64>::identity(n, n).as_slice().to_vec();
                    let rhs = |t: f64, m: &[f64], dm: &mut [f64]| -> Result<()> {
                        base.eval_into(t, &mut y_buf);
                        self.sys.eval_a_into(t, &mut a_buf)?;
                        self.d2f_into(t, &y_buf, &mut work, &mut j_buf)?;
                        for i in 0..n * n {
                            tot[i] = a_buf[i] + j_buf[i];
                        }
                        for c in 0..n {
                            mat_vec(&tot, &m[c * n..(c + 1) * n], &mut dm[c * n..(c + 1) * n], n);
                        }
                        Ok(())
                    };
                    integrate(rhs, t0, &id, to, &self.linear_opts(), None)?
                }
            };
            Ok(Some(sol))
        };
        let fwd = if hi > t0 { run(hi)? } else { None };
        let bwd = if lo < t0 { run(lo)? } else { None };
        let anchor_y = match kind {
            TrajKind::Variational => DMatrix::<f64>::identity(self.n, self.n).as_slice().to_vec(),
            _ => y0.to_vec(),
        };
        Ok(Trajectory {
            anchor_t: t0,
            anchor_y,
            fwd,
            bwd,
        })
    }

    /// Dense solution of y' = A y + f(t, y) through (tau, eta) over
    /// [lo, hi].
    pub fn nonlinear_trajectory(
        &self,
        tau: f64,
        eta: &DVector<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Rc<Trajectory>> {
        self.trajectory(TrajKind::Nonlinear, tau, eta.as_slice(), lo, hi)
    }

    /// Dense solution of x' = A x through (tau, xi) over [lo, hi].
    pub fn linear_trajectory(
        &self,
        tau: f64,
        xi: &DVector<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Rc<Trajectory>> {
        self.trajectory(TrajKind::Linear, tau, xi.as_slice(), lo, hi)
    }

    /// Dense matrix solution of M' = (A + d2f(t, y(t))) M, M(tau) = I, where
    /// y is the nonlinear trajectory through (tau, eta).
    pub fn variational_flow(
        &self,
        tau: f64,
        eta: &DVector<f64>,
        lo: f64,
        hi: f64,
    ) -> Result<Rc<Trajectory>> {
        self.trajectory(TrajKind::Variational, tau, eta.as_slice(), lo, hi)
    }

    pub fn solve_nonlinear(&self, tau: f64, eta: &DVector<f64>, s: f64) -> Result<DVector<f64>> {
        let tr = self.nonlinear_trajectory(tau, eta, s.min(tau), s.max(tau))?;
        Ok(tr.eval_vec(s))
    }

    pub fn solve_variational(&self, tau: f64, eta: &DVector<f64>, s: f64) -> Result<DMatrix<f64>> {
        let tr = self.variational_flow(tau, eta, s.min(tau), s.max(tau))?;
        let vals = tr.eval_vec(s);
        Ok(state_to_mat(self.n, self.n, vals.as_slice()))
    }

    /// Constant (P, Q) pair when the projector family is constant; None
    /// otherwise, with the basis flows warmed so sweep hooks never fail.
    fn projector_pair(&self) -> Result<Option<(DMatrix<f64>, DMatrix<f64>)>> {
        if let Some(p) = &self.const_p {
            let q = DMatrix::identity(self.n, self.n) - p;
            Ok(Some((p.clone(), q)))
        } else {
            self.ensure_basis_flows()?;
            Ok(None)
        }
    }

    fn apply_projector(
        &self,
        konst: &Option<(DMatrix<f64>, DMatrix<f64>)>,
        stable_side: bool,
        t: f64,
        state: &mut [f64],
        cols: usize,
    ) {
        let n = self.n;
        let owned;
        let p: &DMatrix<f64> = match konst {
            Some((p, q)) => {
                if stable_side {
                    p
                } else {
                    q
                }
            }
            None => {
                let proj = self
                    .projector_at(t)
                    .expect("projector evaluation inside sweep");
                owned = if stable_side {
                    proj
                } else {
                    DMatrix::identity(n, n) - proj
                };
                &owned
            }
        };
        let mut tmp = vec![0.0; n];
        for c in 0..cols {
            let col = &mut state[c * n..(c + 1) * n];
            for i in 0..n {
                tmp[i] = (0..n).map(|j| p[(i, j)] * col[j]).sum();
            }
            col.copy_from_slice(&tmp);
        }
    }

    /// Evaluate I(t) = ∫₀^{t_total} G(t,s) g(s) ds for t in [out_lo, out_hi]
    /// by two auxiliary integrations:
    ///
    ///   forward:  w' = A w + P(s) g(s), w(0) = 0, integrated up to out_hi;
    ///   backward: w' = A w + Q(s) g(s), w(t_total) = 0, down to out_lo;
    ///
    /// then I(t) = w_fwd(t) + w_bwd(t). After every accepted step the states
    /// are reprojected onto the stable (resp. unstable) subspace, which keeps
    /// error propagation contractive on both legs. `g` writes n*m values
    /// column-major.
    pub fn green_sweep<G>(
        &self,
        mut g: G,
        m: usize,
        t_total: f64,
        out_lo: f64,
        out_hi: f64,
    ) -> Result<SweepSolution>
    where
        G: FnMut(f64, &mut [f64]) -> Result<()>,
    {
        assert!(0.0 <= out_lo && out_lo <= out_hi && out_hi <= t_total + 1e-12);
        self.check_time(t_total)?;
        let n = self.n;
        let konst = self.projector_pair()?;
        let opts = self.sweep_opts();
        let zero = vec![0.0; n * m];

        let fwd = if out_hi > 1e-13 && self.stable_rank > 0 {
            let mut a_buf = vec![0.0; n * n];
            let mut g_buf = vec![0.0; n * m];
            let rhs = |t: f64, w: &[f64], dw: &mut [f64]| -> Result<()> {
                self.sys.eval_a_into(t, &mut a_buf)?;
                g(t, &mut g_buf)?;
                self.apply_projector(&konst, true, t, &mut g_buf, m);
                for c in 0..m {
                    mat_vec(
                        &a_buf,
                        &w[c * n..(c + 1) * n],
                        &mut dw[c * n..(c + 1) * n],
                        n,
                    );
                }
                for i in 0..n * m {
                    dw[i] += g_buf[i];
                }
                Ok(())
            };
            let mut hook = |t: f64, w: &mut [f64]| self.apply_projector(&konst, true, t, w, m);
            Some(integrate(rhs, 0.0, &zero, out_hi, &opts, Some(&mut hook))?)
        } else {
            None
        };

        let bwd = if out_lo < t_total - 1e-13 && self.stable_rank < n {
            let mut a_buf = vec![0.0; n * n];
            let mut g_buf = vec![0.0; n * m];
            let rhs = |t: f64, w: &[f64], dw: &mut [f64]| -> Result<()> {
                self.sys.eval_a_into(t, &mut a_buf)?;
                g(t, &mut g_buf)?;
                self.apply_projector(&konst, false, t, &mut g_buf, m);
                for c in 0..m {
                    mat_vec(
                        &a_buf,
                        &w[c * n..(c + 1) * n],
                        &mut dw[c * n..(c + 1) * n],
                        n,
                    );
                }
                for i in 0..n * m {
                    dw[i] += g_buf[i];
                }
                Ok(())
            };
            let mut hook = |t: f64, w: &mut [f64]| self.apply_projector(&konst, false, t, w, m);
            Some(integrate(
                rhs,
                t_total,
                &zero,
                out_lo,
                &opts,
                Some(&mut hook),
            )?)
        } else {
            None
        };

        Ok(SweepSolution {
            n,
            m,
            out_lo,
            out_hi,
            fwd,
            bwd,
        })
    }
}

struct D2fWork {
    yp: Vec<f64>,
    fp: Vec<f64>,
    fm: Vec<f64>,
}

impl D2fWork {
    fn new(n: usize) -> Self {
        D2fWork {
            yp: vec![0.0; n],
            fp: vec![0.0; n],
            fm: vec![0.0; n],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::load_system;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const S1: &str = include_str!("../../../configs/s1.json");
    const S2: &str = include_str!("../../../configs/s2.json");
    const ZERO_F: &str = include_str!("../../../configs/zero_f.json");

    /// Upper-triangular system with a genuinely time-varying projector.
    const TRIANGULAR: &str = r#"{
        "dim": 2,
        "A": [["-1", "sin(t)"], ["0", "1"]],
        "f": ["0", "0"],
        "P0": [[1, 0], [0, 0]],
        "horizon": 10
    }"#;

    fn engine(cfg: &str) -> FlowEngine {
        FlowEngine::new(load_system(cfg).unwrap())
    }

    fn norm_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        spectral_norm(&(a - b))
    }

    #[test]
    fn scalar_transition_matches_exponential() {
        let eng = engine(S1);
        let phi = eng.transition_matrix(2.0, 1.0).unwrap();
        assert!((phi[(0, 0)] - (-1.0f64).exp()).abs() < 1e-8);
        let back = eng.transition_matrix(1.0, 2.0).unwrap();
        assert!((back[(0, 0)] - 1.0f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn transition_at_equal_times_is_exact_identity() {
        let eng = engine(S2);
        let phi = eng.transition_matrix(3.25, 3.25).unwrap();
        assert_eq!(phi, DMatrix::identity(2, 2));
    }

    #[test]
    fn cocycle_property_holds() {
        for cfg in [S2, TRIANGULAR] {
            let eng = engine(cfg);
            let lhs =
                eng.transition_matrix(3.0, 1.0).unwrap() * eng.transition_matrix(1.0, 0.0).unwrap();
            let rhs = eng.transition_matrix(3.0, 0.0).unwrap();
            assert!(norm_diff(&lhs, &rhs) < 1e-8);

            let mut rng = ChaCha8Rng::seed_from_u64(7);
            for _ in 0..50 {
                let t: f64 = rng.gen_range(0.0..6.0);
                let u: f64 = rng.gen_range(0.0..6.0);
                let s: f64 = rng.gen_range(0.0..6.0);
                let lhs =
                    eng.transition_matrix(t, u).unwrap() * eng.transition_matrix(u, s).unwrap();
                let rhs = eng.transition_matrix(t, s).unwrap();
                let scale = 1.0 + spectral_norm(&rhs);
                assert!(
                    norm_diff(&lhs, &rhs) / scale < 1e-7,
                    "cocycle defect at ({t}, {u}, {s})"
                );
            }
        }
    }

    #[test]
    fn projector_family_is_invariant_and_idempotent() {
        let eng = engine(TRIANGULAR);
        let p0 = eng.projector_at(0.0).unwrap();
        assert!(norm_diff(&p0, &eng.system().p0) < 1e-10);

        for k in 0..20 {
            let t = 0.5 * k as f64;
            let p = eng.projector_at(t).unwrap();
            assert!(norm_diff(&(&p * &p), &p) < 1e-8, "idempotency at t = {t}");
        }

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let t: f64 = rng.gen_range(0.0..8.0);
            let s: f64 = rng.gen_range(0.0..8.0);
            let phi = eng.transition_matrix(t, s).unwrap();
            let lhs = eng.projector_at(t).unwrap() * &phi;
            let rhs = &phi * eng.projector_at(s).unwrap();
            let scale = 1.0 + spectral_norm(&phi);
            assert!(
                norm_diff(&lhs, &rhs) / scale < 1e-7,
                "invariance defect at ({t}, {s})"
            );
        }
    }

    #[test]
    fn projector_constant_for_diagonal_system() {
        let eng = engine(S2);
        let p = eng.projector_at(5.0).unwrap();
        assert!(norm_diff(&p, &eng.system().p0) < 1e-12);
    }

    #[test]
    fn green_kernel_branches() {
        let eng = engine(S2);
        let g = eng.green(2.0, 1.0).unwrap();
        let mut want = DMatrix::zeros(2, 2);
        want[(0, 0)] = (-1.0f64).exp();
        assert!(norm_diff(&g, &want) < 1e-8);

        let g = eng.green(1.0, 2.0).unwrap();
        let mut want = DMatrix::zeros(2, 2);
        want[(1, 1)] = -(-1.0f64).exp();
        assert!(norm_diff(&g, &want) < 1e-8);
    }

    #[test]
    fn green_kernel_jump_is_identity() {
        for cfg in [S2, TRIANGULAR] {
            let eng = engine(cfg);
            let t = 1.5;
            let below = eng.green(t, t).unwrap();
            let above = eng.green(t, t + 1e-9).unwrap();
            let jump = below - above;
            assert!(norm_diff(&jump, &DMatrix::identity(2, 2)) < 1e-7);
        }
    }

    #[test]
    fn zero_perturbation_flow_is_linear() {
        let eng = engine(ZERO_F);
        let eta = DVector::from_vec(vec![0.4, -0.3]);
        let y = eng.solve_nonlinear(1.0, &eta, 3.0).unwrap();
        let want = eng.transition_matrix(3.0, 1.0).unwrap() * &eta;
        assert!((y - want).norm() < 1e-8);

        let zero = DVector::zeros(2);
        let y = eng.solve_nonlinear(0.5, &zero, 4.0).unwrap();
        assert!(y.norm() <= 1e-15);
    }

    #[test]
    fn origin_is_invariant_for_sine_perturbation() {
        let eng = engine(S1);
        let y = eng.solve_nonlinear(0.0, &DVector::zeros(1), 6.0).unwrap();
        assert!(y.norm() <= 1e-15);
    }

    #[test]
    fn nonlinear_flow_matches_fixed_step_rk4() {
        let eng = engine(S1);
        let y = eng
            .solve_nonlinear(0.0, &DVector::from_vec(vec![1.0]), 2.0)
            .unwrap();

        let rhs = |t: f64, y: f64| -y + 0.1 * (-0.5 * t).exp() * y.sin();
        let mut v = 1.0f64;
        let mut t = 0.0f64;
        let h = 2e-4;
        for _ in 0..10_000 {
            let k1 = rhs(t, v);
            let k2 = rhs(t + h / 2.0, v + h / 2.0 * k1);
            let k3 = rhs(t + h / 2.0, v + h / 2.0 * k2);
            let k4 = rhs(t + h, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        assert!((y[0] - v).abs() < 1e-10, "dopri {} vs rk4 {v}", y[0]);
    }

    #[test]
    fn variational_flow_has_closed_form_along_origin() {
        let eng = engine(S1);
        let v = eng.solve_variational(0.0, &DVector::zeros(1), 1.0).unwrap();
        let want = (-1.0 + 0.2 * (1.0 - (-0.5f64).exp())).exp();
        assert!((v[(0, 0)] - want).abs() < 1e-9);
    }

    #[test]
    fn variational_flow_reduces_to_transition_without_perturbation() {
        let eng = engine(ZERO_F);
        let eta = DVector::from_vec(vec![0.3, -0.2]);
        let v = eng.solve_variational(0.5, &eta, 2.5).unwrap();
        let phi = eng.transition_matrix(2.5, 0.5).unwrap();
        assert!(norm_diff(&v, &phi) < 1e-8);
    }

    #[test]
    fn variational_flow_matches_finite_differences() {
        let eng = engine(S2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let tau: f64 = rng.gen_range(0.0..2.5);
            let s: f64 = rng.gen_range(0.0..2.5);
            let eta = DVector::from_vec(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let jac = eng.solve_variational(tau, &eta, s).unwrap();
            let h = 1e-5;
            let mut fd = DMatrix::zeros(2, 2);
            for j in 0..2 {
                let mut ep = eta.clone();
                ep[j] += h;
                let mut em = eta.clone();
                em[j] -= h;
                let yp = eng.solve_nonlinear(tau, &ep, s).unwrap();
                let ym = eng.solve_nonlinear(tau, &em, s).unwrap();
                for i in 0..2 {
                    fd[(i, j)] = (yp[i] - ym[i]) / (2.0 * h);
                }
            }
            assert!(
                norm_diff(&jac, &fd) < 1e-5,
                "variational vs FD at tau={tau}, s={s}"
            );
        }
    }

    #[test]
    fn sweep_matches_closed_form_on_stable_side() {
        let eng = engine(S1);
        let sweep = eng
            .green_sweep(
                |s, out| {
                    out[0] = (-0.3 * s).exp();
                    Ok(())
                },
                1,
                5.0,
                0.0,
                5.0,
            )
            .unwrap();
        for &t in &[0.0, 0.5, 2.0, 5.0] {
            let got = sweep.eval_vec(t)[0];
            let want = (-t).exp() * ((0.7 * t).exp() - 1.0) / 0.7;
            assert!((got - want).abs() < 1e-9, "t = {t}: {got} vs {want}");
        }

        let point = eng
            .green_sweep(
                |s, out| {
                    out[0] = (-0.3 * s).exp();
                    Ok(())
                },
                1,
                5.0,
                2.0,
                2.0,
            )
            .unwrap();
        assert!((point.eval_vec(2.0)[0] - sweep.eval_vec(2.0)[0]).abs() < 1e-11);
    }

    #[test]
    fn sweep_matches_closed_form_on_unstable_side() {
        let eng = engine(S2);
        let t_total = 6.0;
        let sweep = eng
            .green_sweep(
                |s, out| {
                    out[0] = 0.0;
                    out[1] = (-0.3 * s).exp();
                    Ok(())
                },
                1,
                t_total,
                0.0,
                t_total,
            )
            .unwrap();
        for &t in &[0.0, 1.0, 3.5, 6.0] {
            let got = sweep.eval_vec(t);
            let want = -(t.exp()) * ((-1.3 * t).exp() - (-1.3 * t_total).exp()) / 1.3;
            assert!(got[0].abs() < 1e-10);
            assert!(
                (got[1] - want).abs() < 1e-9,
                "t = {t}: {} vs {want}",
                got[1]
            );
        }
    }

    #[test]
    fn trajectory_cache_extends_span() {
        let eng = engine(ZERO_F);
        let eta = DVector::from_vec(vec![0.2, 0.1]);
        let first = eng.nonlinear_trajectory(1.0, &eta, 0.0, 2.0).unwrap();
        assert!(first.covers(0.0, 2.0));
        assert!(!first.covers(0.0, 6.0));
        let second = eng.nonlinear_trajectory(1.0, &eta, 0.0, 6.0).unwrap();
        assert!(second.covers(0.0, 6.0));
        let y = second.eval_vec(5.0);
        let want = eng.transition_matrix(5.0, 1.0).unwrap() * &eta;
        assert!((y - want).norm() < 1e-8);
        let again = eng.nonlinear_trajectory(1.0, &eta, 2.0, 4.0).unwrap();
        assert!(Rc::ptr_eq(&second, &again));
    }

    #[test]
    fn times_outside_window_are_rejected() {
        let eng = engine(S2);
        assert!(matches!(
            eng.transition_matrix(-1.0, 0.0),
            Err(Error::Domain(_))
        ));
        assert!(matches!(eng.green(0.0, 31.0), Err(Error::Domain(_))));
    }

    #[test]
    fn principal_matrix_matches_transition() {
        let eng = engine(TRIANGULAR);
        let a = eng.principal_matrix(4.0).unwrap();
        let b = eng.transition_matrix(4.0, 0.0).unwrap();
        assert!(norm_diff(&a, &b) < 1e-8);
    }
}
