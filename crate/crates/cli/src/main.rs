//! conjlab: load a system config, resolve its constants (overrides beat
//! config values beat fitted values), check the conjugacy margins, tabulate
//! the maps H and G, run the sampled verification suite, or sweep
//! (theta, b, c) grids.
//!
//! Exit codes: 0 all requested checks pass; 1 failed margins or residuals;
//! 2 invalid input.

// Negated float comparisons (`!(x > 0.0)`) are deliberate: they also reject
// NaN, which `x <= 0.0` lets through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Serialize, Serializer};

use conjlab_core::conditions::{
    check_theorem1, check_theorem2, estimate_perturbation_constants, feasible_theta_interval,
    ConditionReport,
};
use conjlab_core::conjugacy::ConjugacyEngine;
use conjlab_core::dichotomy::{fit_dichotomy, fit_growth, ConstantsBundle, PairGrid};
use conjlab_core::flow::FlowEngine;
use conjlab_core::system::{load_system, SystemDefinition};
use conjlab_core::verify::{records_to_csv, verify_all, SamplePlan};
use conjlab_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "conjlab",
    version,
    about = "Conjugacy laboratory for quasilinear systems with exponential dichotomies"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Resolve constants (fitting any that are missing) and check the
    /// conjugacy and differentiability margins.
    Check(CheckArgs),
    /// Tabulate H and G on a (t, point) grid.
    Conjugate(ConjugateArgs),
    /// Run the sampled verification suite and emit the report.
    Verify(VerifyArgs),
    /// Sweep (theta, b, c) grids and tabulate margins and horizons.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Args)]
struct Common {
    /// System config file (JSON); may also be given positionally.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Positional config path.
    #[arg(value_name = "CONFIG")]
    config_pos: Option<PathBuf>,
    /// Override the integration horizon of the config.
    #[arg(long)]
    horizon: Option<f64>,
    /// Override the output grid step.
    #[arg(long)]
    step: Option<f64>,
    /// Override the ODE tolerance; the fixed-point and tail tolerances
    /// keep their default ratios to it (x100 and x1000).
    #[arg(long)]
    tol: Option<f64>,
    /// Override the weight exponent b.
    #[arg(long)]
    b: Option<f64>,
    /// Override the differentiability parameter c.
    #[arg(long)]
    c: Option<f64>,
    /// Override the perturbation decay rate theta.
    #[arg(long)]
    theta: Option<f64>,
    /// Output path; stdout when absent.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Output format.
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Seed for sampled checks.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct ConjugateArgs {
    #[command(flatten)]
    common: Common,
    /// Query time grid lo:hi:count.
    #[arg(
        long,
        value_name = "LO:HI:N",
        default_value = "0:8:5",
        allow_hyphen_values = true
    )]
    t_grid: String,
    /// Per-coordinate point grid lo:hi:count, Cartesian across coordinates.
    #[arg(
        long,
        value_name = "LO:HI:N",
        default_value = "-2:2:3",
        allow_hyphen_values = true
    )]
    point_grid: String,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Number of samples per check family.
    #[arg(long, default_value_t = 50)]
    samples: usize,
    /// Upper bound of the sampled query times.
    #[arg(long, default_value_t = 8.0)]
    t_max: f64,
    /// Half-width of the sampled point box.
    #[arg(long, default_value_t = 2.0)]
    radius: f64,
    /// Cap on samples used by the invariance family.
    #[arg(long, default_value_t = 20)]
    invariance_cap: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// theta grid lo:hi:count; single resolved theta when absent.
    #[arg(long, value_name = "LO:HI:N", allow_hyphen_values = true)]
    theta_grid: Option<String>,
    /// b grid lo:hi:count; single resolved b when absent.
    #[arg(long, value_name = "LO:HI:N", allow_hyphen_values = true)]
    b_grid: Option<String>,
    /// c grid lo:hi:count; single resolved c when absent.
    #[arg(long, value_name = "LO:HI:N", allow_hyphen_values = true)]
    c_grid: Option<String>,
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Check(a) => run_check(a),
        Cmd::Conjugate(a) => run_conjugate(a),
        Cmd::Verify(a) => run_verify(a),
        Cmd::Sweep(a) => run_sweep(a),
    };
    match outcome {
        Ok(pass) => std::process::exit(if pass { 0 } else { 1 }),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}

fn ser_ext<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else if *v < 0.0 {
        s.serialize_str("-inf")
    } else {
        s.serialize_str("nan")
    }
}

fn ser_ext_opt<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) if x.is_finite() => s.serialize_some(x),
        Some(x) if *x > 0.0 => s.serialize_some("inf"),
        Some(x) if *x < 0.0 => s.serialize_some("-inf"),
        Some(_) => s.serialize_some("nan"),
    }
}

#[derive(Serialize)]
struct ProvenancedConstant {
    name: &'static str,
    value: f64,
    provenance: &'static str,
}

struct Loaded {
    label: String,
    sys: SystemDefinition,
}

fn load(common: &Common) -> Result<Loaded> {
    let path = common
        .config
        .as_ref()
        .or(common.config_pos.as_ref())
        .ok_or_else(|| Error::Config("config path required (--config or positional)".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut sys = load_system(&text)?;
    if let Some(h) = common.horizon {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::Config(format!("horizon must be positive, got {h}")));
        }
        sys.horizon = h;
    }
    if let Some(s) = common.step {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Config(format!("step must be positive, got {s}")));
        }
        sys.numerics.step = s;
    }
    if let Some(t) = common.tol {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::Config(format!("tol must be positive, got {t}")));
        }
        sys.numerics.tol_ode = t;
        sys.numerics.tol_fixedpoint = t * 100.0;
        sys.numerics.tail_tol = t * 1000.0;
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "system".into());
    Ok(Loaded { label, sys })
}

const NAMES: [&str; 12] = [
    "K", "alpha", "mu", "K0", "a", "eps", "Lf", "theta", "M", "delta", "b", "c",
];

/// Resolve all twelve constants with provenance override > config > fitted >
/// default. Fits run only for families with missing members; b defaults to
/// the midpoint of its feasibility interval (delta+mu, alpha), raised when a
/// large eps would otherwise empty the feasible theta interval; theta of a
/// vanishing perturbation defaults to the midpoint of that interval.
type Slot = Vec<(&'static str, Option<(f64, &'static str)>)>;

fn put(slot: &mut Slot, name: &str, v: f64, prov: &'static str, force: bool) {
    for (n, s) in slot.iter_mut() {
        if *n == name && (force || s.is_none()) {
            *s = Some((v, prov));
        }
    }
}

fn get(slot: &Slot, name: &str) -> Option<f64> {
    slot.iter()
        .find(|(n, _)| *n == name)
        .and_then(|(_, s)| *s)
        .map(|(v, _)| v)
}

fn missing(slot: &Slot, names: &[&str]) -> bool {
    names.iter().any(|n| get(slot, n).is_none())
}

fn resolve_constants(
    flow: &FlowEngine,
    common: &Common,
) -> Result<(ConstantsBundle, Vec<ProvenancedConstant>)> {
    let mut slot: Slot = NAMES.iter().map(|n| (*n, None)).collect();
    for (name, ov) in [("b", common.b), ("c", common.c), ("theta", common.theta)] {
        if let Some(v) = ov {
            put(&mut slot, name, v, "override", true);
        }
    }
    for (name, v) in flow.system().constants.entries() {
        if let Some(v) = v {
            put(&mut slot, name, v, "config", false);
        }
    }

    let fit_grid = || {
        let hi = flow.horizon().min(20.0);
        PairGrid::rectangular((0.0, hi, 15), (0.0, hi, 15))
    };
    if missing(&slot, &["K", "alpha", "mu"]) {
        log::info!("fitting dichotomy constants");
        let fit = fit_dichotomy(flow, &fit_grid()?)?;
        put(&mut slot, "K", fit.k, "fitted", false);
        put(&mut slot, "alpha", fit.alpha, "fitted", false);
        put(&mut slot, "mu", fit.mu, "fitted", false);
    }
    if missing(&slot, &["K0", "a", "eps"]) {
        log::info!("fitting growth constants");
        let fit = fit_growth(flow, &fit_grid()?)?;
        put(&mut slot, "K0", fit.k0, "fitted", false);
        put(&mut slot, "a", fit.a, "fitted", false);
        put(&mut slot, "eps", fit.eps, "fitted", false);
    }
    if missing(&slot, &["Lf", "theta", "M", "delta"]) {
        log::info!("estimating perturbation envelopes");
        let fit = estimate_perturbation_constants(flow, 2.0, 2000)?;
        put(&mut slot, "Lf", fit.lf, "fitted", false);
        put(&mut slot, "M", fit.m, "fitted", false);
        put(&mut slot, "delta", fit.delta, "fitted", false);
        // theta is unconstrained by a vanishing perturbation; it falls
        // through to the feasible default below.
        if !fit.zero {
            put(&mut slot, "theta", fit.theta, "fitted", false);
        }
    }
    if get(&slot, "b").is_none() {
        let alpha = get(&slot, "alpha").unwrap_or(1.0);
        let mu = get(&slot, "mu").unwrap_or(0.0);
        let delta = get(&slot, "delta").unwrap_or(0.0);
        let eps = get(&slot, "eps").unwrap_or(0.0);
        // Midpoint of the envelope interval (delta+mu, alpha), raised when
        // needed so the feasible theta interval (which requires
        // eps < mu + b + alpha) stays nonempty.
        let b = (0.5 * (delta + mu + alpha)).max(eps - mu - 0.5 * alpha);
        put(&mut slot, "b", b, "default", false);
    }
    if get(&slot, "c").is_none() {
        put(&mut slot, "c", 4.0, "default", false);
    }
    if get(&slot, "theta").is_none() {
        let draft = ConstantsBundle {
            k: get(&slot, "K").unwrap_or(1.0),
            alpha: get(&slot, "alpha").unwrap_or(1.0),
            mu: get(&slot, "mu").unwrap_or(0.0),
            k0: get(&slot, "K0").unwrap_or(1.0),
            a: get(&slot, "a").unwrap_or(1.0),
            eps: get(&slot, "eps").unwrap_or(0.0),
            lf: get(&slot, "Lf").unwrap_or(0.0),
            theta: 0.0,
            m: get(&slot, "M").unwrap_or(0.0),
            delta: get(&slot, "delta").unwrap_or(0.0),
            b: get(&slot, "b").unwrap_or(0.5),
            c: get(&slot, "c").unwrap_or(4.0),
        };
        let theta = match feasible_theta_interval(&draft) {
            Some((lo, hi)) => 0.5 * (lo + hi),
            None => draft.eps + 1.0,
        };
        put(&mut slot, "theta", theta, "default", false);
    }

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
    let mut provenance = Vec::with_capacity(12);
    for (name, s) in &slot {
        let (v, prov) = s.expect("every constant resolved");
        bundle.set(name, v);
        provenance.push(ProvenancedConstant {
            name,
            value: v,
            provenance: prov,
        });
    }
    bundle.validate()?;
    Ok((bundle, provenance))
}

fn emit(common: &Common, text: &str) -> Result<()> {
    match &common.out {
        Some(p) => fs::write(p, text)
            .map_err(|e| Error::Config(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let err = || Error::Config(format!("grid '{s}' must be lo:hi:count with count >= 1"));
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let lo: f64 = parts[0].parse().map_err(|_| err())?;
    let hi: f64 = parts[1].parse().map_err(|_| err())?;
    let n: usize = parts[2].parse().map_err(|_| err())?;
    if n == 0 || !lo.is_finite() || !hi.is_finite() || (n > 1 && !(hi > lo)) {
        return Err(err());
    }
    if n == 1 {
        return Ok(vec![lo]);
    }
    Ok((0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect())
}

#[derive(Serialize)]
struct CheckReport<'a> {
    system: &'a str,
    constants: &'a [ProvenancedConstant],
    theorem1: &'a ConditionReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    theorem2: &'a Option<ConditionReport>,
    overall: bool,
}

fn margins_csv(sections: &[(&str, &ConditionReport)]) -> String {
    let mut out = String::from("section,name,value,strict,pass\n");
    for (label, report) in sections {
        for m in &report.margins {
            out.push_str(&format!(
                "{label},{},{},{},{}\n",
                m.name, m.value, m.strict, m.pass
            ));
        }
    }
    out
}

fn run_check(args: CheckArgs) -> Result<bool> {
    let loaded = load(&args.common)?;
    let flow = FlowEngine::new(loaded.sys);
    let (bundle, provenance) = resolve_constants(&flow, &args.common)?;
    let theorem1 = check_theorem1(&bundle)?;
    let theorem2 = if bundle.c > 2.0 {
        Some(check_theorem2(&bundle)?)
    } else {
        None
    };
    let overall = theorem1.overall && theorem2.as_ref().is_none_or(|r| r.overall);
    let text = match args.common.format {
        Format::Json => {
            let report = CheckReport {
                system: &loaded.label,
                constants: &provenance,
                theorem1: &theorem1,
                theorem2: &theorem2,
                overall,
            };
            let mut s = serde_json::to_string_pretty(&report).expect("report serialization");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut sections = vec![("theorem1", &theorem1)];
            if let Some(r) = &theorem2 {
                sections.push(("theorem2", r));
            }
            margins_csv(&sections)
        }
    };
    emit(&args.common, &text)?;
    Ok(overall)
}

fn cartesian_points(axis: &[f64], dim: usize) -> Vec<DVector<f64>> {
    let mut pts: Vec<Vec<f64>> = vec![Vec::new()];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(pts.len() * axis.len());
        for p in &pts {
            for v in axis {
                let mut q = p.clone();
                q.push(*v);
                next.push(q);
            }
        }
        pts = next;
    }
    pts.into_iter().map(DVector::from_vec).collect()
}

#[derive(Serialize)]
struct ConjugateRow {
    t: f64,
    point: Vec<f64>,
    h: Vec<f64>,
    g: Vec<f64>,
}

fn run_conjugate(args: ConjugateArgs) -> Result<bool> {
    let loaded = load(&args.common)?;
    let ts = parse_grid(&args.t_grid)?;
    let axis = parse_grid(&args.point_grid)?;
    if ts.iter().any(|t| *t < 0.0) {
        return Err(Error::Config("query times must be nonnegative".into()));
    }
    let flow = FlowEngine::new(loaded.sys);
    let (bundle, _) = resolve_constants(&flow, &args.common)?;
    let t_max = ts.iter().cloned().fold(0.0f64, f64::max);
    let eng = ConjugacyEngine::new(flow, bundle, t_max)?;
    let points = cartesian_points(&axis, eng.flow().dim());
    let mut rows = Vec::with_capacity(ts.len() * points.len());
    for &t in &ts {
        for p in &points {
            let h = eng.map_h(t, p)?;
            let g = eng.map_g(t, p)?;
            rows.push(ConjugateRow {
                t,
                point: p.iter().copied().collect(),
                h: h.iter().copied().collect(),
                g: g.iter().copied().collect(),
            });
        }
    }
    let text = match args.common.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("row serialization");
            s.push('\n');
            s
        }
        Format::Csv => {
            let n = eng.flow().dim();
            let mut out = String::from("t");
            for i in 1..=n {
                out.push_str(&format!(",p{i}"));
            }
            for i in 1..=n {
                out.push_str(&format!(",h{i}"));
            }
            for i in 1..=n {
                out.push_str(&format!(",g{i}"));
            }
            out.push('\n');
            for r in &rows {
                out.push_str(&format!("{}", r.t));
                for v in r.point.iter().chain(&r.h).chain(&r.g) {
                    out.push_str(&format!(",{v}"));
                }
                out.push('\n');
            }
            out
        }
    };
    emit(&args.common, &text)?;
    Ok(true)
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    constants: &'a [ProvenancedConstant],
    #[serde(flatten)]
    report: &'a conjlab_core::verify::VerificationReport,
}

fn run_verify(args: VerifyArgs) -> Result<bool> {
    let loaded = load(&args.common)?;
    if !(args.t_max >= 0.0) || !(args.radius > 0.0) || args.samples == 0 {
        return Err(Error::Config(
            "verify needs t_max >= 0, radius > 0, samples >= 1".into(),
        ));
    }
    let flow = FlowEngine::new(loaded.sys);
    let (bundle, provenance) = resolve_constants(&flow, &args.common)?;
    let eng = ConjugacyEngine::new(flow, bundle, args.t_max)?;
    let plan = SamplePlan::new(
        eng.flow().dim(),
        args.samples,
        args.t_max,
        args.radius,
        args.common.seed,
    );
    let (report, records) = verify_all(&eng, &plan, &loaded.label, args.invariance_cap)?;
    let text = match args.common.format {
        Format::Json => {
            let out = VerifyOutput {
                constants: &provenance,
                report: &report,
            };
            let mut s = serde_json::to_string_pretty(&out).expect("report serialization");
            s.push('\n');
            s
        }
        Format::Csv => records_to_csv(eng.flow().dim(), &records),
    };
    emit(&args.common, &text)?;
    Ok(report.overall)
}

#[derive(Serialize)]
struct SweepRow {
    theta: f64,
    b: f64,
    c: f64,
    valid: bool,
    #[serde(serialize_with = "ser_ext")]
    q: f64,
    theorem1_pass: bool,
    theorem2_pass: Option<bool>,
    #[serde(serialize_with = "ser_ext_opt")]
    t_c: Option<f64>,
    pass: bool,
}

fn run_sweep(args: SweepArgs) -> Result<bool> {
    let loaded = load(&args.common)?;
    let flow = FlowEngine::new(loaded.sys);
    let (base, _) = resolve_constants(&flow, &args.common)?;
    let thetas = match &args.theta_grid {
        Some(g) => parse_grid(g)?,
        None => vec![base.theta],
    };
    let bs = match &args.b_grid {
        Some(g) => parse_grid(g)?,
        None => vec![base.b],
    };
    let cs = match &args.c_grid {
        Some(g) => parse_grid(g)?,
        None => vec![base.c],
    };
    let mut rows = Vec::with_capacity(thetas.len() * bs.len() * cs.len());
    for &theta in &thetas {
        for &b in &bs {
            for &c in &cs {
                let mut bundle = base;
                bundle.theta = theta;
                bundle.b = b;
                bundle.c = c;
                let row = match bundle.validate() {
                    Err(_) => SweepRow {
                        theta,
                        b,
                        c,
                        valid: false,
                        q: f64::NAN,
                        theorem1_pass: false,
                        theorem2_pass: None,
                        t_c: None,
                        pass: false,
                    },
                    Ok(()) => {
                        let t1 = check_theorem1(&bundle)?;
                        let t2 = if c > 2.0 {
                            Some(check_theorem2(&bundle)?)
                        } else {
                            None
                        };
                        let pass = t1.overall && t2.as_ref().is_none_or(|r| r.overall);
                        SweepRow {
                            theta,
                            b,
                            c,
                            valid: true,
                            q: t1.q,
                            theorem1_pass: t1.overall,
                            theorem2_pass: t2.as_ref().map(|r| r.overall),
                            t_c: t2.as_ref().and_then(|r| r.t_c),
                            pass,
                        }
                    }
                };
                rows.push(row);
            }
        }
    }
    let overall = rows.iter().all(|r| r.pass);
    let text = match args.common.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&rows).expect("row serialization");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut out = String::from("theta,b,c,valid,q,theorem1_pass,theorem2_pass,t_c,pass\n");
            for r in &rows {
                let t2 = r.theorem2_pass.map(|p| p.to_string()).unwrap_or_default();
                let tc = r.t_c.map(|v| v.to_string()).unwrap_or_default();
                out.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    r.theta, r.b, r.c, r.valid, r.q, r.theorem1_pass, t2, tc, r.pass
                ));
            }
            out
        }
    };
    emit(&args.common, &text)?;
    Ok(overall)
}
