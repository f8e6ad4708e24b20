//! System definitions: coefficient matrix A(t), perturbation f(t,y), initial
//! projector, horizon and numerical options, loaded from a JSON config.

use crate::dichotomy::ConstantsPatch;
use crate::error::{Error, Result};
use crate::expr::{parse_expression, ExprAst};
use crate::linalg::spectral_norm;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Numerical knobs, all optional in the config.
///
/// `tol_ode` is the relative integrator tolerance (absolute = tol_ode/10).
/// `step` is the output grid spacing for sampled paths, not an integration
/// step: integration is adaptive everywhere. `tol_fixedpoint` stops Picard
/// iteration; `tail_tol` budgets the truncation of infinite-horizon
/// integrals.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsOptions {
    pub step: f64,
    pub tol_ode: f64,
    pub tol_fixedpoint: f64,
    pub tail_tol: f64,
}

impl Default for NumericsOptions {
    fn default() -> Self {
        NumericsOptions {
            step: 0.01,
            tol_ode: 1e-12,
            tol_fixedpoint: 1e-10,
            tail_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SystemDefinition {
    pub dim: usize,
    /// Row-major n×n grid of expressions over `t` only.
    pub a: Vec<Vec<ExprAst>>,
    /// n expressions over `t, y1..yn`.
    pub f: Vec<ExprAst>,
    pub p0: DMatrix<f64>,
    pub horizon: f64,
    pub constants: ConstantsPatch,
    pub numerics: NumericsOptions,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    dim: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<String>>,
    f: Vec<String>,
    #[serde(rename = "P0")]
    p0: Vec<Vec<f64>>,
    horizon: f64,
    #[serde(default)]
    constants: ConstantsPatch,
    #[serde(default)]
    numerics: NumericsOptions,
}

pub fn load_system(config_text: &str) -> Result<SystemDefinition> {
    let raw: RawConfig = serde_json::from_str(config_text)
        .map_err(|e| Error::Config(format!("malformed config: {e}")))?;
    let n = raw.dim;
    if n == 0 {
        return Err(Error::Config("dim must be at least 1".into()));
    }
    if !(raw.horizon > 0.0 && raw.horizon.is_finite()) {
        return Err(Error::Config("horizon must be positive and finite".into()));
    }

    if raw.a.len() != n || raw.a.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "A must be {n}x{n} for dim = {n}"
        )));
    }
    if raw.f.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "f must have {n} components for dim = {n}, got {}",
            raw.f.len()
        )));
    }
    if raw.p0.len() != n || raw.p0.iter().any(|row| row.len() != n) {
        return Err(Error::DimensionMismatch(format!(
            "P0 must be {n}x{n} for dim = {n}"
        )));
    }

    let mut a = Vec::with_capacity(n);
    for (i, row) in raw.a.iter().enumerate() {
        let mut exprs = Vec::with_capacity(n);
        for (j, src) in row.iter().enumerate() {
            let ast = parse_expression(src)
                .map_err(|e| Error::Config(format!("A[{i}][{j}] = `{src}`: {e}")))?;
            if ast.references_y() {
                return Err(Error::Config(format!(
                    "A[{i}][{j}] = `{src}` references state variables; A depends on t only"
                )));
            }
            exprs.push(ast);
        }
        a.push(exprs);
    }

    let mut f = Vec::with_capacity(n);
    for (i, src) in raw.f.iter().enumerate() {
        let ast =
            parse_expression(src).map_err(|e| Error::Config(format!("f[{i}] = `{src}`: {e}")))?;
        let max_y = ast.max_y_index();
        if max_y > n {
            return Err(Error::DimensionMismatch(format!(
                "f[{i}] references y{max_y} but dim = {n}"
            )));
        }
        f.push(ast);
    }

    let p0 = DMatrix::from_fn(n, n, |i, j| raw.p0[i][j]);
    let idem = &p0 * &p0 - &p0;
    let defect = spectral_norm(&idem);
    if defect > 1e-12 {
        return Err(Error::Projector(format!(
            "P0*P0 differs from P0 by {defect:.3e} (tolerance 1e-12)"
        )));
    }

    Ok(SystemDefinition {
        dim: n,
        a,
        f,
        p0,
        horizon: raw.horizon,
        constants: raw.constants,
        numerics: raw.numerics,
    })
}

impl SystemDefinition {
    /// True when every perturbation component is the literal zero, which
    /// short-circuits all conjugacy integrals.
    pub fn is_zero_perturbation(&self) -> bool {
        self.f.iter().all(|e| e.is_zero_literal())
    }

    /// True when A is structurally diagonal (off-diagonal entries are the
    /// literal zero).
    pub fn a_is_diagonal(&self) -> bool {
        self.a.iter().enumerate().all(|(i, row)| {
            row.iter()
                .enumerate()
                .all(|(j, e)| i == j || e.is_zero_literal())
        })
    }

    /// Evaluate A(t) column-major into `out` (length n*n).
    pub fn eval_a_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let n = self.dim;
        for (i, row) in self.a.iter().enumerate() {
            for (j, e) in row.iter().enumerate() {
                out[j * n + i] = e.eval(t, &[])?;
            }
        }
        Ok(())
    }

    /// Evaluate f(t,y) into `out` (length n).
    pub fn eval_f_into(&self, t: f64, y: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, e) in self.f.iter().enumerate() {
            out[i] = e.eval(t, y)?;
        }
        Ok(())
    }

    pub fn eval_a(&self, t: f64) -> Result<DMatrix<f64>> {
        let mut buf = vec![0.0; self.dim * self.dim];
        self.eval_a_into(t, &mut buf)?;
        Ok(DMatrix::from_column_slice(self.dim, self.dim, &buf))
    }

    pub fn eval_f(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        let mut buf = vec![0.0; self.dim];
        self.eval_f_into(t, y.as_slice(), &mut buf)?;
        Ok(DVector::from_column_slice(&buf))
    }
}
