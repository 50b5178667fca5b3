//! Central finite differences and the gradient-check report.

use std::fmt::Write as _;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::export::fmt_e12;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every element `i`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub parameter: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// One row per parameter; the check passes iff every row does.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    /// Prefixes every parameter id, e.g. to merge reports from several checks.
    pub fn prefixed(mut self, prefix: &str) -> Self {
        for r in &mut self.rows {
            r.parameter = format!("{prefix}{}", r.parameter);
        }
        self
    }

    pub fn extend(&mut self, other: GradCheckReport) {
        self.rows.extend(other.rows);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,max_rel_err,tol,pass\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.parameter, fmt_e12(r.max_rel_err), fmt_e12(r.tol), r.pass);
        }
        s
    }
}

pub fn gradcheck(graph: &Graph, output: Var, tol: f64) -> Result<GradCheckReport> {
    gradcheck_with_step(graph, output, tol, DEFAULT_STEP)
}

/// Compares reverse-mode gradients of a scalar `output` against central
/// differences obtained by replaying the graph with perturbed parameters.
pub fn gradcheck_with_step(graph: &Graph, output: Var, tol: f64, h: f64) -> Result<GradCheckReport> {
    let grads = graph.backward(output)?;
    let mut report = GradCheckReport::default();
    for (name, analytic) in grads.iter() {
        let leaf = graph
            .param_var(name)
            .ok_or_else(|| Error::UnregisteredParameter(name.to_string()))?;
        let mut replay = graph.clone();
        let numeric = finite_diff_grad(
            |t| {
                replay.set_leaf(leaf, t.clone())?;
                replay.value(output).item()
            },
            graph.value(leaf),
            h,
        )?;
        let max_rel_err = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n))
            .fold(0.0, f64::max);
        report.rows.push(GradCheckRow {
            parameter: name.to_string(),
            max_rel_err,
            tol,
            pass: max_rel_err < tol,
        });
    }
    Ok(report)
}
