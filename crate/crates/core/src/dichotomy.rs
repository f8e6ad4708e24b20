//! Constants bundles for the dichotomy/growth/perturbation estimates, grid
//! fits that recover them from computed transition norms, and margin checks
//! of a proposed bundle against the same norms.
//!
//! All envelope inequalities are handled in log scale: a sample is a triple
//! (L, d, s) with L = ln |operator|, d = |t - s|, and the fit searches the
//! smallest constants whose affine envelope dominates every sample.

use crate::error::{Error, Result};
use crate::flow::FlowEngine;
use serde::{Deserialize, Serialize};

/// Optional per-constant overrides as they appear in config files.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConstantsPatch {
    #[serde(rename = "K", skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu: Option<f64>,
    #[serde(rename = "K0", skip_serializing_if = "Option::is_none")]
    pub k0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    #[serde(rename = "Lf", skip_serializing_if = "Option::is_none")]
    pub lf: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
}

impl ConstantsPatch {
    pub fn entries(&self) -> [(&'static str, Option<f64>); 12] {
        [
            ("K", self.k),
            ("alpha", self.alpha),
            ("mu", self.mu),
            ("K0", self.k0),
            ("a", self.a),
            ("eps", self.eps),
            ("Lf", self.lf),
            ("theta", self.theta),
            ("M", self.m),
            ("delta", self.delta),
            ("b", self.b),
            ("c", self.c),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries()
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| *v)
    }

    pub fn set(&mut self, name: &str, v: f64) -> bool {
        let slot = match name {
            "K" => &mut self.k,
            "alpha" => &mut self.alpha,
            "mu" => &mut self.mu,
            "K0" => &mut self.k0,
            "a" => &mut self.a,
            "eps" => &mut self.eps,
            "Lf" => &mut self.lf,
            "theta" => &mut self.theta,
            "M" => &mut self.m,
            "delta" => &mut self.delta,
            "b" => &mut self.b,
            "c" => &mut self.c,
            _ => return false,
        };
        *slot = Some(v);
        true
    }
}

/// The full constant set driving every condition check:
///
/// - (K, alpha, mu): |Phi(t,s)P(s)| <= K e^{-alpha(t-s)+mu s} for t >= s and
///   |Phi(t,s)Q(s)| <= K e^{-alpha(s-t)+mu s} for t <= s;
/// - (K0, a, eps):   |Phi(t,s)| <= K0 e^{a|t-s|+eps s};
/// - (Lf, theta, M, delta): |f(t,x)-f(t,y)| <= Lf e^{-theta t}|x-y| and
///   |f(t,0)| <= M e^{-delta t};
/// - b: weight exponent of the fixed-point norm; c: bound parameter of the
///   differentiability estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConstantsBundle {
    #[serde(rename = "K")]
    pub k: f64,
    pub alpha: f64,
    pub mu: f64,
    #[serde(rename = "K0")]
    pub k0: f64,
    pub a: f64,
    pub eps: f64,
    #[serde(rename = "Lf")]
    pub lf: f64,
    pub theta: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub delta: f64,
    pub b: f64,
    pub c: f64,
}

impl ConstantsBundle {
    pub fn validate(&self) -> Result<()> {
        let fields = self.entries();
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::InvalidBundle(format!("{name} = {v} is not finite")));
            }
        }
        if self.k < 1.0 {
            return Err(Error::InvalidBundle(format!("K = {} must be >= 1", self.k)));
        }
        if self.k0 < 1.0 {
            return Err(Error::InvalidBundle(format!(
                "K0 = {} must be >= 1",
                self.k0
            )));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidBundle(format!(
                "alpha = {} must be positive",
                self.alpha
            )));
        }
        if self.mu < 0.0 || self.mu >= self.alpha {
            return Err(Error::InvalidBundle(format!(
                "mu = {} must satisfy 0 <= mu < alpha = {}",
                self.mu, self.alpha
            )));
        }
        for (name, v) in [
            ("a", self.a),
            ("eps", self.eps),
            ("Lf", self.lf),
            ("theta", self.theta),
            ("M", self.m),
            ("delta", self.delta),
        ] {
            if v < 0.0 {
                return Err(Error::InvalidBundle(format!("{name} = {v} must be >= 0")));
            }
        }
        if self.b <= 0.0 {
            return Err(Error::InvalidBundle(format!(
                "b = {} must be positive",
                self.b
            )));
        }
        Ok(())
    }

    /// a + max(mu, eps) - alpha; nonnegative for any honestly fitted bundle,
    /// reported rather than enforced.
    pub fn compat_margin(&self) -> f64 {
        self.a + self.mu.max(self.eps) - self.alpha
    }

    pub fn entries(&self) -> [(&'static str, f64); 12] {
        [
            ("K", self.k),
            ("alpha", self.alpha),
            ("mu", self.mu),
            ("K0", self.k0),
            ("a", self.a),
            ("eps", self.eps),
            ("Lf", self.lf),
            ("theta", self.theta),
            ("M", self.m),
            ("delta", self.delta),
            ("b", self.b),
            ("c", self.c),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries()
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
    }

    pub fn set(&mut self, name: &str, v: f64) -> bool {
        let slot = match name {
            "K" => &mut self.k,
            "alpha" => &mut self.alpha,
            "mu" => &mut self.mu,
            "K0" => &mut self.k0,
            "a" => &mut self.a,
            "eps" => &mut self.eps,
            "Lf" => &mut self.lf,
            "theta" => &mut self.theta,
            "M" => &mut self.m,
            "delta" => &mut self.delta,
            "b" => &mut self.b,
            "c" => &mut self.c,
            _ => return false,
        };
        *slot = v;
        true
    }

    pub fn apply_patch(&mut self, patch: &ConstantsPatch) {
        for (name, v) in patch.entries() {
            if let Some(v) = v {
                self.set(name, v);
            }
        }
    }
}

/// Rectangular grid of (t, s) pairs used by the fits and margin checks.
#[derive(Debug, Clone)]
pub struct PairGrid {
    pub pairs: Vec<(f64, f64)>,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

impl PairGrid {
    pub fn rectangular(t: (f64, f64, usize), s: (f64, f64, usize)) -> Result<PairGrid> {
        for (lo, hi, n) in [t, s] {
            if n < 2 || !(hi > lo) || lo < 0.0 {
                return Err(Error::DegenerateGrid(format!(
                    "axis ({lo}, {hi}, {n}) needs n >= 2 and 0 <= lo < hi"
                )));
            }
        }
        let ts = linspace(t.0, t.1, t.2);
        let ss = linspace(s.0, s.1, s.2);
        let mut pairs = Vec::with_capacity(ts.len() * ss.len());
        for &tv in &ts {
            for &sv in &ss {
                pairs.push((tv, sv));
            }
        }
        Ok(PairGrid { pairs })
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DichotomyFit {
    pub k: f64,
    pub alpha: f64,
    pub mu: f64,
    /// Smallest log-scale slack over all grid samples under the fitted
    /// constants; nonnegative when the envelope dominates the data.
    pub worst_margin: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GrowthFit {
    pub k0: f64,
    pub a: f64,
    pub eps: f64,
    pub worst_margin: f64,
}

/// One log-scale envelope sample: L <= intercept - alpha*d + mu*s (dichotomy)
/// or L <= intercept + a*d + eps*s (growth).
struct Sample {
    l: f64,
    d: f64,
    s: f64,
}

fn dichotomy_samples(engine: &FlowEngine, grid: &PairGrid) -> Result<Vec<Sample>> {
    let norms = engine.pair_norms(&grid.pairs)?;
    let mut out = Vec::new();
    for p in norms {
        if p.t >= p.s && p.stable > 1e-300 {
            out.push(Sample {
                l: p.stable.ln(),
                d: p.t - p.s,
                s: p.s,
            });
        }
        if p.t <= p.s && p.unstable > 1e-300 {
            out.push(Sample {
                l: p.unstable.ln(),
                d: p.s - p.t,
                s: p.s,
            });
        }
    }
    Ok(out)
}

/// Fit (K, alpha, mu) so that every stable/unstable norm sample lies under
/// its exponential envelope. For each mu on a coarse grid the minimal
/// intercept is fixed by the coincidence pairs (d = 0), the largest
/// admissible decay rate follows from the rest, and the smallest feasible mu
/// wins. Small nudges keep every margin strictly positive under exact
/// arithmetic.
pub fn fit_dichotomy(engine: &FlowEngine, grid: &PairGrid) -> Result<DichotomyFit> {
    let samples = dichotomy_samples(engine, grid)?;
    if samples.is_empty() {
        return Err(Error::DegenerateGrid(
            "no usable norm samples on the grid".into(),
        ));
    }
    if !samples.iter().any(|s| s.d > 0.0) {
        return Err(Error::DegenerateGrid(
            "grid has no separated (t, s) pairs".into(),
        ));
    }

    let mut best: Option<(f64, f64, f64)> = None;
    for i in 0..=80 {
        let mu = 0.05 * i as f64;
        let mut k_log = 0.0f64;
        for s in samples.iter().filter(|s| s.d == 0.0) {
            k_log = k_log.max(s.l - mu * s.s);
        }
        let mut alpha_max = f64::INFINITY;
        for s in samples.iter().filter(|s| s.d > 0.0) {
            alpha_max = alpha_max.min((k_log + mu * s.s - s.l) / s.d);
        }
        if alpha_max.is_finite() && alpha_max > mu + 1e-9 {
            best = Some((mu, k_log, alpha_max));
            break;
        }
    }

    let (mu, k_log, alpha_max) = best.ok_or_else(|| {
        Error::NoDichotomy("no exponential dichotomy envelope fits the computed norms".into())
    })?;
    let k = k_log.exp() * (1.0 + 1e-6);
    let alpha = alpha_max - 1e-6;
    let worst = samples
        .iter()
        .map(|s| k.ln() - alpha * s.d + mu * s.s - s.l)
        .fold(f64::INFINITY, f64::min);
    Ok(DichotomyFit {
        k,
        alpha,
        mu,
        worst_margin: worst,
    })
}

/// Fit (K0, a, eps) dominating the full transition norms: the pairs rooted
/// at s = 0 pin the smallest admissible growth rate on a 0.01 grid, the rest
/// fix eps.
pub fn fit_growth(engine: &FlowEngine, grid: &PairGrid) -> Result<GrowthFit> {
    let norms = engine.pair_norms(&grid.pairs)?;
    let samples: Vec<Sample> = norms
        .iter()
        .map(|p| Sample {
            l: p.full.ln(),
            d: (p.t - p.s).abs(),
            s: p.s,
        })
        .collect();
    if !samples.iter().any(|s| s.d > 0.0) {
        return Err(Error::DegenerateGrid(
            "grid has no separated (t, s) pairs".into(),
        ));
    }

    let mut a_req = 0.0f64;
    for s in samples.iter().filter(|s| s.s == 0.0 && s.d > 0.0) {
        a_req = a_req.max(s.l / s.d);
    }
    let a = (((a_req - 1e-9) / 0.01).ceil() * 0.01).max(0.01);

    let mut eps = 0.0f64;
    for s in samples.iter().filter(|s| s.s > 0.0) {
        eps = eps.max((s.l - a * s.d) / s.s);
    }
    eps += 1e-6;
    let k0: f64 = 1.0 + 1e-6;
    let worst = samples
        .iter()
        .map(|s| k0.ln() + a * s.d + eps * s.s - s.l)
        .fold(f64::INFINITY, f64::min);
    Ok(GrowthFit {
        k0,
        a,
        eps,
        worst_margin: worst,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilyMargin {
    pub family: String,
    /// Smallest log-scale slack over the grid; negative means the claimed
    /// envelope is violated somewhere.
    pub worst: f64,
    pub worst_pair: (f64, f64),
    pub samples: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifiedConstants {
    pub margins: Vec<FamilyMargin>,
    pub compat_margin: f64,
    pub pass: bool,
}

/// Check a proposed bundle against computed norms on the grid. `pass`
/// requires every family margin >= -1e-9; the compatibility margin
/// a + max(mu, eps) - alpha is reported alongside.
pub fn verify_constants(
    engine: &FlowEngine,
    bundle: &ConstantsBundle,
    grid: &PairGrid,
) -> Result<VerifiedConstants> {
    bundle.validate()?;
    let norms = engine.pair_norms(&grid.pairs)?;

    let mut families = vec![
        ("stable".to_string(), f64::INFINITY, (0.0, 0.0), 0usize),
        ("unstable".to_string(), f64::INFINITY, (0.0, 0.0), 0usize),
        ("growth".to_string(), f64::INFINITY, (0.0, 0.0), 0usize),
    ];
    let mut update = |idx: usize, margin: f64, pair: (f64, f64)| {
        let fam = &mut families[idx];
        fam.3 += 1;
        if margin < fam.1 {
            fam.1 = margin;
            fam.2 = pair;
        }
    };

    for p in &norms {
        if p.t >= p.s && p.stable > 1e-300 {
            let margin =
                bundle.k.ln() - bundle.alpha * (p.t - p.s) + bundle.mu * p.s - p.stable.ln();
            update(0, margin, (p.t, p.s));
        }
        if p.t <= p.s && p.unstable > 1e-300 {
            let margin =
                bundle.k.ln() - bundle.alpha * (p.s - p.t) + bundle.mu * p.s - p.unstable.ln();
            update(1, margin, (p.t, p.s));
        }
        let margin = bundle.k0.ln() + bundle.a * (p.t - p.s).abs() + bundle.eps * p.s - p.full.ln();
        update(2, margin, (p.t, p.s));
    }

    let margins: Vec<FamilyMargin> = families
        .into_iter()
        .filter(|f| f.3 > 0)
        .map(|(family, worst, worst_pair, samples)| FamilyMargin {
            family,
            worst,
            worst_pair,
            samples,
        })
        .collect();
    let pass = margins.iter().all(|m| m.worst >= -1e-9);
    Ok(VerifiedConstants {
        margins,
        compat_margin: bundle.compat_margin(),
        pass,
    })
}
