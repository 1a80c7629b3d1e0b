//! Projected first-order methods over the nonnegative orthant driven by a
//! stochastic first-order oracle: accelerated stochastic approximation
//! (AC-SA), its restarted variant AC-SA², the regularization-ladder wrapper
//! SGD3-refined and plain projected SGD.

mod acsa;
mod psgd;
mod sgd3;

use serde::{Deserialize, Serialize};

pub use acsa::{ac_sa, ac_sa2, ac_sa2_monitored, ac_sa_monitored};
pub use psgd::{projected_sgd, projected_sgd_monitored, PsgdOutput, StepSchedule};
pub use sgd3::{grad_map_alpha_default, ladder_depth, sgd3_refined, sgd3_refined_monitored, InnerSolver, Sgd3Report};

use crate::error::{check_len, invalid, Result};

/// Source of gradients for a convex objective on `R^dim`.
pub trait FirstOrderOracle {
    fn dim(&self) -> usize;

    /// Writes an unbiased gradient estimate at `w` into `out`. Each call
    /// counts against the optimizer budget.
    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]);

    /// Writes the exact gradient at `w` into `out` and returns `true`, or
    /// returns `false` if the oracle cannot compute it. Not budgeted.
    fn full_gradient(&self, _w: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

impl<O: FirstOrderOracle + ?Sized> FirstOrderOracle for &mut O {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]) {
        (**self).sample_gradient(w, out)
    }

    fn full_gradient(&self, w: &[f64], out: &mut [f64]) -> bool {
        (**self).full_gradient(w, out)
    }
}

/// Noise-free oracle from a gradient closure; samples are exact gradients.
pub struct ExactOracle<F> {
    dim: usize,
    grad: F,
}

impl<F: Fn(&[f64], &mut [f64])> ExactOracle<F> {
    pub fn new(dim: usize, grad: F) -> Self {
        Self { dim, grad }
    }
}

impl<F: Fn(&[f64], &mut [f64])> FirstOrderOracle for ExactOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]) {
        (self.grad)(w, out)
    }

    fn full_gradient(&self, w: &[f64], out: &mut [f64]) -> bool {
        (self.grad)(w, out);
        true
    }
}

/// Stochastic oracle from a sampling closure, without exact gradients.
pub struct FnOracle<F> {
    dim: usize,
    sample: F,
}

impl<F: FnMut(&[f64], &mut [f64])> FnOracle<F> {
    pub fn new(dim: usize, sample: F) -> Self {
        Self { dim, sample }
    }
}

impl<F: FnMut(&[f64], &mut [f64])> FirstOrderOracle for FnOracle<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]) {
        (self.sample)(w, out)
    }
}

/// Adds `sum_i c_i (w - a_i)` to every gradient of the wrapped oracle, i.e.
/// optimizes `F(w) + sum_i (c_i / 2) ||w - a_i||^2`.
pub(crate) struct Regularized<'o, O: ?Sized> {
    inner: &'o mut O,
    anchors: Vec<(f64, Vec<f64>)>,
}

impl<'o, O: FirstOrderOracle + ?Sized> Regularized<'o, O> {
    pub(crate) fn new(inner: &'o mut O) -> Self {
        Self {
            inner,
            anchors: Vec::new(),
        }
    }

    pub(crate) fn push_anchor(&mut self, coef: f64, at: Vec<f64>) {
        self.anchors.push((coef, at));
    }

    fn add_penalty(&self, w: &[f64], out: &mut [f64]) {
        for (c, a) in &self.anchors {
            for ((o, wi), ai) in out.iter_mut().zip(w).zip(a) {
                *o += c * (wi - ai);
            }
        }
    }
}

impl<O: FirstOrderOracle + ?Sized> FirstOrderOracle for Regularized<'_, O> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]) {
        self.inner.sample_gradient(w, out);
        self.add_penalty(w, out);
    }

    fn full_gradient(&self, w: &[f64], out: &mut [f64]) -> bool {
        if !self.inner.full_gradient(w, out) {
            return false;
        }
        self.add_penalty(w, out);
        true
    }
}

/// Receives `(oracle_calls, current_output_point)` every `every` calls.
pub struct Monitor<'a> {
    every: usize,
    calls: usize,
    sink: Option<&'a mut dyn FnMut(usize, &[f64])>,
}

impl<'a> Monitor<'a> {
    pub fn silent() -> Self {
        Self {
            every: usize::MAX,
            calls: 0,
            sink: None,
        }
    }

    pub fn new(every: usize, sink: &'a mut dyn FnMut(usize, &[f64])) -> Result<Self> {
        if every == 0 {
            return Err(invalid("record_every must be at least 1"));
        }
        Ok(Self {
            every,
            calls: 0,
            sink: Some(sink),
        })
    }

    /// Oracle calls observed so far.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub(crate) fn tick(&mut self, point: &[f64]) {
        self.calls += 1;
        if let Some(sink) = self.sink.as_mut() {
            if self.calls % self.every == 0 {
                sink(self.calls, point);
            }
        }
    }
}

/// Which optimizer to run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    AcSa,
    AcSa2,
    Sgd3AcSa,
    Sgd3AcSa2,
    ProjectedSgd,
}

impl std::str::FromStr for Method {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ac-sa" => Ok(Method::AcSa),
            "ac-sa2" => Ok(Method::AcSa2),
            "sgd3-ac-sa" => Ok(Method::Sgd3AcSa),
            "sgd3-ac-sa2" => Ok(Method::Sgd3AcSa2),
            "projected-sgd" => Ok(Method::ProjectedSgd),
            other => Err(invalid(format!(
                "unknown optimizer {other:?} (expected ac-sa, ac-sa2, sgd3-ac-sa, sgd3-ac-sa2, projected-sgd)"
            ))),
        }
    }
}

/// Budget and curvature constants shared by all methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Number of stochastic gradient evaluations.
    pub budget: usize,
    /// Strong convexity (added regularization for SGD3-refined).
    pub mu: f64,
    /// Smoothness constant.
    pub smoothness: f64,
    pub seed: u64,
    pub record_every: usize,
}

/// Result of [`run`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub point: Vec<f64>,
    pub sgd3: Option<Sgd3Report>,
}

/// Dispatches to the selected method. Projected SGD uses the constant step
/// `1 / smoothness` (or `1 / mu` when the smoothness is zero).
pub fn run<O: FirstOrderOracle + ?Sized>(
    method: Method,
    oracle: &mut O,
    w0: &[f64],
    config: &OptimizerConfig,
    monitor: &mut Monitor<'_>,
) -> Result<RunOutput> {
    let (mu, m, t) = (config.mu, config.smoothness, config.budget);
    let simple = |point| Ok(RunOutput { point, sgd3: None });
    match method {
        Method::AcSa => simple(ac_sa_monitored(oracle, w0, mu, m, t, monitor)?),
        Method::AcSa2 => simple(ac_sa2_monitored(oracle, w0, mu, m, t, monitor)?),
        Method::Sgd3AcSa | Method::Sgd3AcSa2 => {
            let inner = if method == Method::Sgd3AcSa {
                InnerSolver::AcSa
            } else {
                InnerSolver::AcSa2
            };
            let (point, report) = sgd3_refined_monitored(oracle, w0, mu, m, t, inner, monitor)?;
            Ok(RunOutput {
                point,
                sgd3: Some(report),
            })
        }
        Method::ProjectedSgd => {
            let step = if m > 0.0 { 1.0 / m } else { 1.0 / mu };
            let out = projected_sgd_monitored(oracle, w0, StepSchedule::Constant(step), t, monitor)?;
            simple(out.last)
        }
    }
}

pub(crate) fn check_start<O: FirstOrderOracle + ?Sized>(oracle: &O, w0: &[f64], budget: usize) -> Result<()> {
    if budget < 1 {
        return Err(invalid("iteration budget must be at least 1"));
    }
    check_len("starting point", oracle.dim(), w0.len())?;
    if let Some(v) = w0.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid(format!("starting point must be finite and nonnegative, found {v}")));
    }
    Ok(())
}

pub(crate) fn check_curvature(mu: f64, m: f64) -> Result<()> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid(format!("strong convexity must be positive, got {mu}")));
    }
    if !(m >= 0.0 && m.is_finite()) {
        return Err(invalid(format!("smoothness must be nonnegative, got {m}")));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn regularized_oracle_adds_anchor_pull() {
        let mut base = diag_quadratic(vec![1.0, 2.0], vec![0.0, 0.0]);
        let mut reg = Regularized::new(&mut base);
        reg.push_anchor(0.5, vec![1.0, 1.0]);
        reg.push_anchor(2.0, vec![0.0, 3.0]);
        let mut out = vec![0.0; 2];
        reg.sample_gradient(&[2.0, 2.0], &mut out);
        assert_eq!(out, vec![2.0 + 0.5 + 4.0, 4.0 + 0.5 - 2.0]);
        let mut full = vec![0.0; 2];
        assert!(reg.full_gradient(&[2.0, 2.0], &mut full));
        assert_eq!(out, full);
    }

    #[test]
    fn monitor_fires_on_schedule() {
        let mut seen = Vec::new();
        let mut sink = |calls: usize, w: &[f64]| seen.push((calls, w[0]));
        let mut mon = Monitor::new(3, &mut sink).unwrap();
        for i in 0..10 {
            mon.tick(&[i as f64]);
        }
        assert_eq!(mon.calls(), 10);
        drop(mon);
        assert_eq!(seen, vec![(3, 2.0), (6, 5.0), (9, 8.0)]);
        let mut noop = |_: usize, _: &[f64]| {};
        assert!(Monitor::new(0, &mut noop).is_err());
    }

    #[test]
    fn method_names_parse() {
        for m in [Method::AcSa, Method::AcSa2, Method::Sgd3AcSa, Method::Sgd3AcSa2, Method::ProjectedSgd] {
            let name = serde_json::to_string(&m).unwrap();
            assert_eq!(name.trim_matches('"').parse::<Method>().unwrap(), m);
        }
        assert!("sgd".parse::<Method>().is_err());
    }

    #[test]
    fn run_dispatch_reports_ladder_only_for_sgd3() {
        let cfg = OptimizerConfig {
            budget: 400,
            mu: 0.25,
            smoothness: 2.0,
            seed: 0,
            record_every: 1,
        };
        for method in [Method::AcSa, Method::AcSa2, Method::Sgd3AcSa, Method::Sgd3AcSa2, Method::ProjectedSgd] {
            let mut oracle = diag_quadratic(vec![1.0, 2.0], vec![1.0, -1.0]);
            let mut calls = 0;
            let mut sink = |_: usize, w: &[f64]| {
                assert!(w.iter().all(|v| *v >= 0.0));
                calls += 1;
            };
            let mut mon = Monitor::new(1, &mut sink).unwrap();
            let out = run(method, &mut oracle, &[0.0, 0.0], &cfg, &mut mon).unwrap();
            drop(mon);
            assert_eq!(calls, 400, "{method:?}");
            assert_eq!(out.sgd3.is_some(), matches!(method, Method::Sgd3AcSa | Method::Sgd3AcSa2));
            assert!(out.point.iter().all(|v| *v >= 0.0));
        }
    }
}
