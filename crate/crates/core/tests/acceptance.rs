//! Acceptance suite: ten end-to-end criteria, each printing one PASS/FAIL
//! line (visible with --nocapture) and enforcing a wall-clock budget.

use std::time::Instant;

use conjlab_core::conditions::diffeo_horizon;
use conjlab_core::conjugacy::ConjugacyEngine;
use conjlab_core::dichotomy::{
    fit_dichotomy, fit_growth, verify_constants, ConstantsBundle, PairGrid,
};
use conjlab_core::flow::FlowEngine;
use conjlab_core::linalg::spectral_norm;
use conjlab_core::system::load_system;
use conjlab_core::verify::{
    verify_bounds, verify_conjugacy, verify_invariance, verify_roundtrip, SamplePlan, Section,
};
use nalgebra::{DMatrix, DVector};

const S1: &str = include_str!("../../../configs/s1.json");
const S2: &str = include_str!("../../../configs/s2.json");
const ZERO_F: &str = include_str!("../../../configs/zero_f.json");
const BV: &str = include_str!("../../../configs/bv.json");

const SEED: u64 = 42;
const T_MAX: f64 = 8.0;
const RADIUS: f64 = 2.0;

fn engine(cfg: &str, t_query_max: f64) -> ConjugacyEngine {
    let sys = load_system(cfg).unwrap();
    let mut bundle = ConstantsBundle {
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
        b: 0.5,
        c: 4.0,
    };
    bundle.apply_patch(&sys.constants);
    ConjugacyEngine::new(FlowEngine::new(sys), bundle, t_query_max).unwrap()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn section_max(section: &Section, check: &str) -> f64 {
    section
        .checks
        .iter()
        .find(|c| c.check == check)
        .unwrap_or_else(|| panic!("missing check {check}"))
        .max_residual
}

/// Print the criterion line, then fail the test if the value check or the
/// budget was missed.
fn conclude(label: &str, budget_s: f64, start: Instant, pass: bool, detail: String) {
    let secs = start.elapsed().as_secs_f64();
    let in_budget = secs <= budget_s;
    let status = if pass && in_budget { "PASS" } else { "FAIL" };
    println!("acceptance {label}: {status} ({detail}; {secs:.2}s of {budget_s:.0}s budget)");
    assert!(pass, "{label}: {detail}");
    assert!(in_budget, "{label}: took {secs:.2}s, budget {budget_s:.0}s");
}

#[test]
fn criterion_01_identity_suite() {
    let start = Instant::now();
    let eng = engine(ZERO_F, T_MAX);
    let n = eng.flow().dim();
    let mut worst = 0.0f64;
    for &t in &linspace(0.0, T_MAX, 10) {
        for &v in &linspace(-RADIUS, RADIUS, 10) {
            let p = DVector::from_fn(n, |i, _| if i % 2 == 0 { v } else { -v });
            let h = eng.map_h(t, &p).unwrap();
            let g = eng.map_g(t, &p).unwrap();
            worst = worst.max((h - &p).norm()).max((g - &p).norm());
        }
    }
    conclude(
        "01 identity_suite",
        10.0,
        start,
        worst <= 1e-12,
        format!("max |H - id|, |G - id| = {worst:.3e} vs 1e-12"),
    );
}

#[test]
fn criterion_02_conjugacy_residuals() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for cfg in [S1, S2] {
        let eng = engine(cfg, T_MAX);
        let plan = SamplePlan::new(eng.flow().dim(), 50, T_MAX, RADIUS, SEED);
        let section = verify_conjugacy(&eng, &plan).unwrap();
        for name in ["conjugacy_forward", "conjugacy_backward"] {
            worst = worst.max(section_max(&section, name));
        }
    }
    conclude(
        "02 conjugacy_residuals",
        120.0,
        start,
        worst <= 1e-6,
        format!("max residual {worst:.3e} vs 1e-6"),
    );
}

#[test]
fn criterion_03_round_trips() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for cfg in [S1, S2] {
        let eng = engine(cfg, T_MAX);
        let plan = SamplePlan::new(eng.flow().dim(), 50, T_MAX, RADIUS, SEED);
        let section = verify_roundtrip(&eng, &plan).unwrap();
        for name in ["roundtrip_g_after_h", "roundtrip_h_after_g"] {
            worst = worst.max(section_max(&section, name));
        }
    }
    conclude(
        "03 round_trips",
        120.0,
        start,
        worst <= 1e-6,
        format!("max residual {worst:.3e} vs 1e-6"),
    );
}

#[test]
fn criterion_04_picard_contraction() {
    let start = Instant::now();
    let eng = engine(S1, T_MAX);
    let q = eng.contraction_q();
    let mut pass = (q - 5.0 / 24.0).abs() <= 1e-12;
    let mut worst_ratio = 0.0f64;
    let mut worst_iter = 0usize;
    for (tau, xi) in [
        (0.0, 2.0),
        (2.0, -2.0),
        (5.0, 1.0),
        (8.0, -0.5),
        (3.3, 1.7),
        (6.7, -1.1),
    ] {
        let run = eng
            .fixed_point_z(tau, &DVector::from_element(1, xi))
            .unwrap();
        worst_iter = worst_iter.max(run.iterations);
        for &r in &run.ratios {
            worst_ratio = worst_ratio.max(r);
        }
        pass &= run.iterations <= 15 && run.final_delta <= 1e-10;
    }
    pass &= worst_ratio <= 0.26;
    conclude(
        "04 picard_contraction",
        30.0,
        start,
        pass,
        format!(
            "q = {q:.6}, max ratio {worst_ratio:.4} vs 0.26, max iterations {worst_iter} vs 15"
        ),
    );
}

#[test]
fn criterion_05_weighted_bound() {
    let start = Instant::now();
    let eng = engine(S1, T_MAX);
    let bd = *eng.bundle();
    let rhs = bd.k * bd.m / (bd.alpha + bd.delta + bd.mu)
        + bd.k * bd.m / (bd.alpha - (bd.delta + bd.mu))
        + 1e-3;
    let mut sup = 0.0f64;
    for &t in &linspace(0.0, T_MAX, 10) {
        for &v in &linspace(-RADIUS, RADIUS, 10) {
            let xi = DVector::from_element(1, v);
            let h = eng.map_h(t, &xi).unwrap();
            sup = sup.max((-bd.b * t).exp() * (h - &xi).norm());
        }
    }
    conclude(
        "05 weighted_bound",
        30.0,
        start,
        sup <= rhs,
        format!("sup e^(-bt)|H - id| = {sup:.6} vs {rhs:.6}"),
    );
}

#[test]
fn criterion_06_jacobian() {
    let start = Instant::now();
    let fd_step = 1e-5;
    let mut worst_fd = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut min_det = f64::INFINITY;
    let mut pass = true;
    for cfg in [S1, S2] {
        let eng = engine(cfg, T_MAX);
        let report = eng.theorem2().expect("c = 4 attaches the jacobian report");
        pass &= report.overall;
        let t_cap = report
            .t_c
            .unwrap_or(f64::NEG_INFINITY)
            .min(eng.query_horizon());
        let n = eng.flow().dim();
        let bd = *eng.bundle();
        let pts: Vec<DVector<f64>> = if n == 1 {
            vec![
                DVector::from_element(1, -1.5),
                DVector::from_element(1, 0.8),
            ]
        } else {
            vec![
                DVector::from_vec(vec![-1.5, 1.0]),
                DVector::from_vec(vec![0.8, -0.6]),
            ]
        };
        for &t in &[0.0, 2.0, 4.0, 6.0, 7.5] {
            if t >= t_cap {
                continue;
            }
            let lam_bound = (((-bd.alpha + bd.a + bd.eps) * t).exp() + 1.0) / bd.c + 1e-6;
            for eta in &pts {
                let (jac, lam) = eng.jacobian_g(t, eta).unwrap();
                let mut fd = DMatrix::zeros(n, n);
                for j in 0..n {
                    let mut ep = eta.clone();
                    ep[j] += fd_step;
                    let mut em = eta.clone();
                    em[j] -= fd_step;
                    let gp = eng.map_g(t, &ep).unwrap();
                    let gm = eng.map_g(t, &em).unwrap();
                    for i in 0..n {
                        fd[(i, j)] = (gp[i] - gm[i]) / (2.0 * fd_step);
                    }
                }
                worst_fd = worst_fd.max(spectral_norm(&(jac.clone() - fd)));
                worst_excess = worst_excess.max(lam - lam_bound);
                min_det = min_det.min(jac.determinant().abs());
            }
        }
    }
    pass &= worst_fd <= 1e-4 && worst_excess <= 0.0 && min_det >= 1e-6;
    conclude(
        "06 jacobian",
        120.0,
        start,
        pass,
        format!(
            "max |(I - L) - FD| = {worst_fd:.3e} vs 1e-4, max Lambda excess {worst_excess:.3e}, \
             min |det| = {min_det:.3e} vs 1e-6"
        ),
    );
}

#[test]
fn criterion_07_horizon_formula() {
    let start = Instant::now();
    let mut bd = ConstantsBundle {
        k: 1.0,
        alpha: 1.0,
        mu: 0.0,
        k0: 1.0,
        a: 1.2,
        eps: 0.1,
        lf: 0.0,
        theta: 0.5,
        m: 0.0,
        delta: 0.0,
        b: 0.5,
        c: 3.0,
    };
    let t_c = diffeo_horizon(&bd).unwrap();
    let oracle = 2.310_490_601_866_484_2_f64;
    let finite_ok = (t_c - oracle).abs() <= 1e-9;
    bd.a = 0.5;
    let t_inf = diffeo_horizon(&bd).unwrap();
    let inf_ok = t_inf.is_infinite() && t_inf > 0.0;
    conclude(
        "07 horizon_formula",
        1.0,
        start,
        finite_ok && inf_ok,
        format!("t_c = {t_c:.12} vs {oracle:.12}, nonpositive rate gives {t_inf}"),
    );
}

#[test]
fn criterion_08_dichotomy_fitting() {
    let start = Instant::now();
    let grid = PairGrid::rectangular((0.0, 20.0, 15), (0.0, 20.0, 15)).unwrap();
    let filler = ConstantsBundle {
        k: 1.0,
        alpha: 1.0,
        mu: 0.0,
        k0: 1.0,
        a: 1.0,
        eps: 0.0,
        lf: 0.0,
        theta: 1.0,
        m: 0.0,
        delta: 0.0,
        b: 1.0,
        c: 4.0,
    };
    let mut pass = true;

    // Fitted envelopes of the oscillatory scalar system must hold on the
    // whole pair grid.
    let bv_flow = FlowEngine::new(load_system(BV).unwrap());
    let dfit = fit_dichotomy(&bv_flow, &grid).unwrap();
    let gfit = fit_growth(&bv_flow, &grid).unwrap();
    let fitted = ConstantsBundle {
        k: dfit.k,
        alpha: dfit.alpha,
        mu: dfit.mu,
        k0: gfit.k0,
        a: gfit.a,
        eps: gfit.eps,
        ..filler
    };
    let vc = verify_constants(&bv_flow, &fitted, &grid).unwrap();
    let fit_worst = vc
        .margins
        .iter()
        .map(|m| m.worst)
        .fold(f64::INFINITY, f64::min);
    pass &= fit_worst >= -1e-9;

    // Hand-derived envelope: integrating the coefficient gives
    // |x(t)| <= e^2 e^{-4(t-s)+2s} |x(s)| forward and the matching
    // e^2 e^{4|t-s|+2s} two-sided growth bound.
    let e2 = 2.0f64.exp();
    let hand = ConstantsBundle {
        k: e2,
        alpha: 4.0,
        mu: 2.0,
        k0: e2,
        a: 4.0,
        eps: 2.0,
        ..filler
    };
    let hc = verify_constants(&bv_flow, &hand, &grid).unwrap();
    let hand_worst = hc
        .margins
        .iter()
        .map(|m| m.worst)
        .fold(f64::INFINITY, f64::min);
    pass &= hc.pass;

    // Every fitted bundle must satisfy the rate compatibility
    // a + max(mu, eps) >= alpha.
    let mut min_compat = f64::INFINITY;
    for cfg in [S1, S2, BV] {
        let flow = FlowEngine::new(load_system(cfg).unwrap());
        let d = fit_dichotomy(&flow, &grid).unwrap();
        let g = fit_growth(&flow, &grid).unwrap();
        min_compat = min_compat.min(g.a + d.mu.max(g.eps) - d.alpha);
    }
    pass &= min_compat >= 0.0;

    conclude(
        "08 dichotomy_fitting",
        60.0,
        start,
        pass,
        format!(
            "fitted margin {fit_worst:.2e}, hand margin {hand_worst:.2e}, \
             min compatibility {min_compat:.3e}"
        ),
    );
}

#[test]
fn criterion_09_growth_bounds() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for cfg in [S1, S2] {
        let eng = engine(cfg, T_MAX);
        let plan = SamplePlan::new(eng.flow().dim(), 100, T_MAX, RADIUS, SEED);
        let section = verify_bounds(&eng, &plan).unwrap();
        for name in ["bound_trajectory_difference", "bound_trajectory_jacobian"] {
            worst = worst.max(section_max(&section, name));
        }
    }
    conclude(
        "09 growth_bounds",
        60.0,
        start,
        worst <= 1e-6,
        format!("max relative violation {worst:.3e} vs 1e-6"),
    );
}

#[test]
fn criterion_10_invariance() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut pass = true;
    for cfg in [S1, S2] {
        let eng = engine(cfg, T_MAX);
        let plan = SamplePlan::new(eng.flow().dim(), 20, T_MAX, RADIUS, SEED);
        let section = verify_invariance(&eng, &plan).unwrap();
        assert_eq!(section.checks.len(), 5);
        for c in &section.checks {
            worst = worst.max(c.max_residual);
            pass &= c.pass;
        }
    }
    conclude(
        "10 invariance",
        120.0,
        start,
        pass && worst <= 1e-6,
        format!("max residual {worst:.3e} vs 1e-6"),
    );
}
