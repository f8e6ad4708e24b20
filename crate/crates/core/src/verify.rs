//! Verification suite: samples the conjugacy identities, the round trips,
//! the a-priori bounds, and the flow-invariance properties, and assembles a
//! deterministic machine-readable report.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conjugacy::ConjugacyEngine;
use crate::dichotomy::ConstantsBundle;
use crate::error::Result;
use crate::linalg::spectral_norm;

/// Identity residuals must sit below this; bound violations use the same
/// scale but are measured relative to the bound's magnitude.
pub const RESIDUAL_TOL: f64 = 1e-6;

const TINY: f64 = 1e-300;

/// One sampled anchor: a query time, a re-anchoring time, and a point.
#[derive(Debug, Clone)]
pub struct Sample {
    pub t: f64,
    pub tau: f64,
    pub point: DVector<f64>,
}

/// Deterministic sample set: fixed corner cases first (origin, box corners,
/// extreme times), then seeded uniform draws over [0, t_max]^2 x [-r, r]^n.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub seed: u64,
    pub t_max: f64,
    pub radius: f64,
    pub samples: Vec<Sample>,
}

impl SamplePlan {
    pub fn new(dim: usize, count: usize, t_max: f64, radius: f64, seed: u64) -> Self {
        let mut samples = Vec::with_capacity(count);
        samples.push(Sample {
            t: 0.0,
            tau: 0.0,
            point: DVector::zeros(dim),
        });
        if count > 1 {
            samples.push(Sample {
                t: t_max,
                tau: 0.0,
                point: DVector::from_element(dim, radius),
            });
        }
        if count > 2 {
            samples.push(Sample {
                t: 0.0,
                tau: t_max,
                point: DVector::from_element(dim, -radius),
            });
        }
        if count > 3 {
            samples.push(Sample {
                t: 0.5 * t_max,
                tau: 0.5 * t_max,
                point: DVector::from_fn(dim, |i, _| if i % 2 == 0 { radius } else { -radius }),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        while samples.len() < count {
            samples.push(Sample {
                t: rng.gen_range(0.0..=t_max),
                tau: rng.gen_range(0.0..=t_max),
                point: DVector::from_fn(dim, |_, _| rng.gen_range(-radius..=radius)),
            });
        }
        samples.truncate(count);
        SamplePlan {
            seed,
            t_max,
            radius,
            samples,
        }
    }
}

/// Aggregate result of one named check over all its samples.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check: String,
    pub anchor: String,
    pub max_residual: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
}

/// One per-sample residual row for the plot-ready CSV.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub check: String,
    pub sample: usize,
    pub t: f64,
    pub tau: f64,
    pub point: Vec<f64>,
    pub residual: f64,
}

/// The checks of one verify_* call plus its per-sample residuals.
#[derive(Debug, Default)]
pub struct Section {
    pub checks: Vec<CheckResult>,
    pub records: Vec<SampleRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Environment {
    pub dim: usize,
    pub seed: u64,
    pub sample_count: usize,
    pub t_max: f64,
    pub radius: f64,
    pub quad_horizon: f64,
    pub grid_step: f64,
    pub tol_ode: f64,
    pub tol_fixedpoint: f64,
    pub tail_tol: f64,
    pub bundle: ConstantsBundle,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub system: String,
    pub environment: Environment,
    pub checks: Vec<CheckResult>,
    pub overall: bool,
}

impl VerificationReport {
    /// Deterministic JSON: field order is struct order, vectors keep build
    /// order, no maps anywhere.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialization");
        s.push('\n');
        s
    }
}

/// CSV of per-sample residuals: check,sample,t,tau,p1..pn,residual.
pub fn records_to_csv(dim: usize, records: &[SampleRecord]) -> String {
    let mut out = String::from("check,sample,t,tau");
    for i in 1..=dim {
        out.push_str(&format!(",p{i}"));
    }
    out.push_str(",residual\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}", r.check, r.sample, r.t, r.tau));
        for v in &r.point {
            out.push_str(&format!(",{v}"));
        }
        out.push_str(&format!(",{}\n", r.residual));
    }
    out
}

struct CheckAccum {
    check: &'static str,
    anchor: &'static str,
    tolerance: f64,
    worst: f64,
    count: usize,
    records: Vec<SampleRecord>,
}

impl CheckAccum {
    fn new(check: &'static str, anchor: &'static str, tolerance: f64) -> Self {
        CheckAccum {
            check,
            anchor,
            tolerance,
            worst: 0.0,
            count: 0,
            records: Vec::new(),
        }
    }

    fn add(&mut self, idx: usize, t: f64, tau: f64, point: &DVector<f64>, residual: f64) {
        self.worst = self.worst.max(residual);
        self.count += 1;
        self.records.push(SampleRecord {
            check: self.check.to_string(),
            sample: idx,
            t,
            tau,
            point: point.iter().copied().collect(),
            residual,
        });
    }

    fn finish(self, section: &mut Section) {
        section.checks.push(CheckResult {
            check: self.check.to_string(),
            anchor: self.anchor.to_string(),
            max_residual: self.worst,
            tolerance: self.tolerance,
            pass: self.worst <= self.tolerance,
            samples: self.count,
        });
        section.records.extend(self.records);
    }
}

/// Relative violation of lhs <= rhs: zero when satisfied, otherwise the
/// overshoot scaled by the bound.
fn violation(lhs: f64, rhs: f64) -> f64 {
    ((lhs - rhs) / rhs.max(TINY)).max(0.0)
}

/// Both conjugation identities: H maps linear trajectories onto nonlinear
/// ones, G maps nonlinear trajectories onto linear ones. The linear side of
/// the G identity applies Phi(t,tau) as a flow, never as an assembled
/// matrix, so neutral directions do not lose accuracy.
pub fn verify_conjugacy(eng: &ConjugacyEngine, plan: &SamplePlan) -> Result<Section> {
    let mut fwd = CheckAccum::new(
        "conjugacy_forward",
        "H(t, x(t,tau,xi)) = y(t, tau, H(tau,xi))",
        RESIDUAL_TOL,
    );
    let mut bwd = CheckAccum::new(
        "conjugacy_backward",
        "G(t, y(t,tau,eta)) = Phi(t,tau) G(tau,eta)",
        RESIDUAL_TOL,
    );
    for (idx, s) in plan.samples.iter().enumerate() {
        let (lo, hi) = (s.t.min(s.tau), s.t.max(s.tau));
        let x_t = eng
            .flow()
            .linear_trajectory(s.tau, &s.point, lo, hi)?
            .eval_vec(s.t);
        let lhs = eng.map_h(s.t, &x_t)?;
        let h_tau = eng.map_h(s.tau, &s.point)?;
        let rhs = eng.flow().solve_nonlinear(s.tau, &h_tau, s.t)?;
        fwd.add(idx, s.t, s.tau, &s.point, (lhs - rhs).norm());

        let y_t = eng.flow().solve_nonlinear(s.tau, &s.point, s.t)?;
        let lhs = eng.map_g(s.t, &y_t)?;
        let g_tau = eng.map_g(s.tau, &s.point)?;
        let rhs = eng
            .flow()
            .linear_trajectory(s.tau, &g_tau, lo, hi)?
            .eval_vec(s.t);
        bwd.add(idx, s.t, s.tau, &s.point, (lhs - rhs).norm());
    }
    let mut section = Section::default();
    fwd.finish(&mut section);
    bwd.finish(&mut section);
    Ok(section)
}

/// G(t, H(t, .)) and H(t, G(t, .)) must both return the starting point.
pub fn verify_roundtrip(eng: &ConjugacyEngine, plan: &SamplePlan) -> Result<Section> {
    let mut gh = CheckAccum::new("roundtrip_g_after_h", "G(t, H(t,xi)) = xi", RESIDUAL_TOL);
    let mut hg = CheckAccum::new("roundtrip_h_after_g", "H(t, G(t,eta)) = eta", RESIDUAL_TOL);
    for (idx, s) in plan.samples.iter().enumerate() {
        let h = eng.map_h(s.t, &s.point)?;
        let back = eng.map_g(s.t, &h)?;
        gh.add(idx, s.t, s.tau, &s.point, (back - &s.point).norm());
        let g = eng.map_g(s.t, &s.point)?;
        let fwd = eng.map_h(s.t, &g)?;
        hg.add(idx, s.t, s.tau, &s.point, (fwd - &s.point).norm());
    }
    let mut section = Section::default();
    gh.finish(&mut section);
    hg.finish(&mut section);
    Ok(section)
}

/// A-priori bound families, each measured as a relative violation:
/// - the weighted norm of the fixed point z*,
/// - the growth of trajectory differences in the initial point,
/// - the growth of the trajectory Jacobian,
/// - the envelope of the perturbation's state derivative,
/// - the norm of the Jacobian perturbation Lambda (only when the
///   differentiability margins pass; otherwise the theory claims nothing).
pub fn verify_bounds(eng: &ConjugacyEngine, plan: &SamplePlan) -> Result<Section> {
    let b = *eng.bundle();
    let n = eng.flow().dim();
    let gronwall = (b.k0 * b.lf / (b.theta - b.eps)).exp();

    let mut fixed = CheckAccum::new(
        "bound_weighted_fixed_point",
        "sup_t e^{-b t}|z*(t)| <= K M/(alpha+delta+mu) + K M/(alpha-delta-mu)",
        RESIDUAL_TOL,
    );
    let mut diff = CheckAccum::new(
        "bound_trajectory_difference",
        "|y(s,t,eta) - y(s,t,eta')| <= K0 e^{a|t-s|+eps t} e^{K0 Lf/(theta-eps)} |eta - eta'|",
        RESIDUAL_TOL,
    );
    let mut jac = CheckAccum::new(
        "bound_trajectory_jacobian",
        "|dy/deta(s,t,eta)| <= K0 e^{a|s-t|+eps t} e^{Lf K0/(theta-eps)}",
        RESIDUAL_TOL,
    );
    let mut denv = CheckAccum::new(
        "bound_derivative_envelope",
        "|d2f(t,x)| <= Lf e^{-theta t}",
        RESIDUAL_TOL,
    );
    let mut lam = CheckAccum::new(
        "bound_jacobian_perturbation",
        "|Lambda(t,eta)| <= (1/c)(e^{(-alpha+a+eps) t} + 1)",
        RESIDUAL_TOL,
    );

    let z_rhs = b.k * b.m / (b.alpha + b.delta + b.mu) + b.k * b.m / (b.alpha - b.delta - b.mu);
    let s_grid: Vec<f64> = (0..=4).map(|i| plan.t_max * i as f64 / 4.0).collect();
    let lambda_live = eng.theorem2().map(|r| r.overall).unwrap_or(false);

    for (idx, s) in plan.samples.iter().enumerate() {
        let z = eng.compute_z(s.tau, &s.point)?;
        fixed.add(
            idx,
            s.t,
            s.tau,
            &s.point,
            violation(z.weighted_norm(), z_rhs),
        );

        // Difference and Jacobian growth share the anchor (t, point); the
        // partner point is offset along a coordinate axis cycling with the
        // sample index.
        let h_off = 0.1 * plan.radius.max(1e-3);
        let mut partner = s.point.clone();
        let axis = idx % n;
        partner[axis] += if idx % 2 == 0 { h_off } else { -h_off };
        let sep = (&partner - &s.point).norm();
        let y_a = eng
            .flow()
            .nonlinear_trajectory(s.t, &s.point, 0.0, plan.t_max)?;
        let y_b = eng
            .flow()
            .nonlinear_trajectory(s.t, &partner, 0.0, plan.t_max)?;
        let v = eng
            .flow()
            .variational_flow(s.t, &s.point, 0.0, plan.t_max)?;
        for &sq in &s_grid {
            let growth = b.k0 * (b.a * (s.t - sq).abs() + b.eps * s.t).exp() * gronwall;
            let lhs = (y_a.eval_vec(sq) - y_b.eval_vec(sq)).norm();
            diff.add(idx, sq, s.t, &s.point, violation(lhs, growth * sep));
            let vm = crate::linalg::state_to_mat(n, n, v.eval_vec(sq).as_slice());
            let lhs = spectral_norm(&vm);
            jac.add(idx, sq, s.t, &s.point, violation(lhs, growth));
        }

        let d2 = eng.flow().d2f(s.t, &s.point)?;
        let rhs = b.lf * (-b.theta * s.t).exp();
        denv.add(
            idx,
            s.t,
            s.tau,
            &s.point,
            violation(spectral_norm(&d2), rhs),
        );

        if lambda_live {
            let (_, lam_norm) = eng.jacobian_g(s.t, &s.point)?;
            let rhs = ((-b.alpha + b.a + b.eps) * s.t).exp().min(f64::MAX) + 1.0;
            lam.add(idx, s.t, s.tau, &s.point, violation(lam_norm, rhs / b.c));
        }
    }

    let mut section = Section::default();
    fixed.finish(&mut section);
    diff.finish(&mut section);
    jac.finish(&mut section);
    denv.finish(&mut section);
    if lambda_live {
        lam.finish(&mut section);
    }
    Ok(section)
}

/// Flow invariance of z* and w* under re-anchoring along their own
/// trajectories, the fixed-point characterizations of G and H, and the
/// agreement of both computable forms of G.
pub fn verify_invariance(eng: &ConjugacyEngine, plan: &SamplePlan) -> Result<Section> {
    let mut inv_z = CheckAccum::new(
        "invariance_z",
        "z*(t;(tau,xi)) = z*(t;(r, x(r,tau,xi)))",
        RESIDUAL_TOL,
    );
    let mut inv_w = CheckAccum::new(
        "invariance_w",
        "w*(t;(tau,eta)) = w*(t;(r, y(r,tau,eta)))",
        RESIDUAL_TOL,
    );
    let mut char_g = CheckAccum::new(
        "characterization_g",
        "G(tau,eta) = eta - z*(tau;(tau, G(tau,eta)))",
        RESIDUAL_TOL,
    );
    let mut char_h = CheckAccum::new(
        "characterization_h",
        "H(tau,xi) = xi - w*(tau;(tau, H(tau,xi)))",
        RESIDUAL_TOL,
    );
    let mut alt = CheckAccum::new(
        "alternative_form_g",
        "G(s,eta) = Phi(s,0)(y(0,s,eta) + w*(0;(s,eta)))",
        RESIDUAL_TOL,
    );

    let r_set: Vec<f64> = [0.5, 1.0, 2.0]
        .into_iter()
        .filter(|r| *r <= plan.t_max)
        .collect();
    let eval_grid: Vec<f64> = [0.0, 1.0, 2.0, 4.0, 8.0]
        .into_iter()
        .filter(|t| *t <= plan.t_max + 1e-12)
        .collect();

    for (idx, s) in plan.samples.iter().enumerate() {
        let z0 = eng.z_star(s.tau, &s.point)?;
        let w0 = eng.w_star(s.tau, &s.point)?;
        let mut worst_z = 0.0f64;
        let mut worst_w = 0.0f64;
        for &r in &r_set {
            let (lo, hi) = (r.min(s.tau), r.max(s.tau));
            let xr = eng
                .flow()
                .linear_trajectory(s.tau, &s.point, lo, hi)?
                .eval_vec(r);
            let zr = eng.z_star(r, &xr)?;
            let yr = eng.flow().solve_nonlinear(s.tau, &s.point, r)?;
            let wr = eng.w_star(r, &yr)?;
            for &te in &eval_grid {
                worst_z = worst_z.max((z0.eval_vec(te) - zr.eval_vec(te)).norm());
                worst_w = worst_w.max((w0.eval_vec(te) - wr.eval_vec(te)).norm());
            }
        }
        inv_z.add(idx, s.t, s.tau, &s.point, worst_z);
        inv_w.add(idx, s.t, s.tau, &s.point, worst_w);

        let g = eng.map_g(s.tau, &s.point)?;
        let z_at = eng.z_star(s.tau, &g)?.eval_vec(s.tau);
        char_g.add(idx, s.t, s.tau, &s.point, (&g - (&s.point - z_at)).norm());
        let h = eng.map_h(s.tau, &s.point)?;
        let w_at = eng.w_star_at(s.tau, s.tau, &h)?;
        char_h.add(idx, s.t, s.tau, &s.point, (&h - (&s.point - w_at)).norm());

        let direct = eng.map_g(s.t, &s.point)?;
        let alt_val = eng.map_g_alt(s.t, &s.point)?;
        alt.add(idx, s.t, s.tau, &s.point, (direct - alt_val).norm());
    }

    let mut section = Section::default();
    inv_z.finish(&mut section);
    inv_w.finish(&mut section);
    char_g.finish(&mut section);
    char_h.finish(&mut section);
    alt.finish(&mut section);
    Ok(section)
}

/// Full suite. `invariance_cap` trims the (more expensive) invariance
/// section to the first samples of the plan.
pub fn verify_all(
    eng: &ConjugacyEngine,
    plan: &SamplePlan,
    system: &str,
    invariance_cap: usize,
) -> Result<(VerificationReport, Vec<SampleRecord>)> {
    let mut checks = Vec::new();
    let mut records = Vec::new();
    let mut take = |s: Section| {
        checks.extend(s.checks);
        records.extend(s.records);
    };
    take(verify_conjugacy(eng, plan)?);
    take(verify_roundtrip(eng, plan)?);
    take(verify_bounds(eng, plan)?);
    let inv_plan = SamplePlan {
        seed: plan.seed,
        t_max: plan.t_max,
        radius: plan.radius,
        samples: plan.samples[..plan.samples.len().min(invariance_cap)].to_vec(),
    };
    take(verify_invariance(eng, &inv_plan)?);
    let overall = checks.iter().all(|c| c.pass);
    let numerics = eng.flow().system().numerics.clone();
    let report = VerificationReport {
        system: system.to_string(),
        environment: Environment {
            dim: eng.flow().dim(),
            seed: plan.seed,
            sample_count: plan.samples.len(),
            t_max: plan.t_max,
            radius: plan.radius,
            quad_horizon: eng.quad_horizon(),
            grid_step: eng.grid_step(),
            tol_ode: numerics.tol_ode,
            tol_fixedpoint: numerics.tol_fixedpoint,
            tail_tol: numerics.tail_tol,
            bundle: *eng.bundle(),
        },
        checks,
        overall,
    };
    Ok((report, records))
}
