use serde::{Deserialize, Serialize};

use super::acsa::{run_ac_sa, run_ac_sa2};
use super::{check_curvature, check_start, FirstOrderOracle, Monitor, Regularized};
use crate::dual::gradient_mapping_norm_flat;
use crate::error::{invalid, Result};

/// Solver used on each rung of the regularization ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InnerSolver {
    AcSa,
    AcSa2,
}

/// Diagnostics of one SGD3-refined run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd3Report {
    /// Ladder depth `J = floor(log2(M / mu))`.
    pub depth: usize,
    /// Strong-convexity parameter handed to each stage (`mu_0, mu_1, ...`).
    pub stage_mu: Vec<f64>,
    pub stage_budgets: Vec<usize>,
    /// `||G_alpha||` of the unregularized objective after each stage, when
    /// the oracle provides exact gradients.
    pub stage_grad_map_norms: Vec<f64>,
    pub alpha: f64,
    /// `4 sqrt(M / mu) J`, the budget the run is checked against.
    pub sqrt_threshold: f64,
    /// `(M / mu) log2(M / mu)`, the stricter budget scale of the ladder.
    pub log_threshold: f64,
    pub below_threshold: bool,
}

/// Largest `j` with `2^j mu <= M`, or 0 when `M < 2 mu`.
pub fn ladder_depth(mu: f64, m: f64) -> usize {
    let mut j = 0usize;
    let mut scaled = mu;
    while scaled * 2.0 <= m && j < 1024 {
        scaled *= 2.0;
        j += 1;
    }
    j
}

/// `alpha = 1 / (2^(J+2) mu)`.
pub fn grad_map_alpha_default(mu: f64, m: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(invalid(format!("strong convexity must be positive, got {mu}")));
    }
    let j = ladder_depth(mu, m) as i32;
    Ok(1.0 / (2f64.powi(j + 2) * mu))
}

pub fn sgd3_refined<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    inner: InnerSolver,
) -> Result<Vec<f64>> {
    Ok(sgd3_refined_monitored(oracle, w0, mu, m, budget, inner, &mut Monitor::silent())?.0)
}

/// Runs the regularization ladder `F + (mu/2)||w - w0||^2 + sum_j (mu_j/2)||w - w_j||^2`
/// with `mu_j = 2^j mu`. With a zero-depth ladder a single inner call gets
/// the whole budget.
pub fn sgd3_refined_monitored<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    inner: InnerSolver,
    monitor: &mut Monitor<'_>,
) -> Result<(Vec<f64>, Sgd3Report)> {
    check_start(oracle, w0, budget)?;
    check_curvature(mu, m)?;
    if mu > m {
        return Err(invalid(format!("strong convexity {mu} exceeds smoothness {m}")));
    }
    let depth = ladder_depth(mu, m);
    let ratio = m / mu;
    let sqrt_threshold = 4.0 * ratio.sqrt() * depth as f64;
    let log_threshold = ratio * ratio.log2();
    let below_threshold = (budget as f64) <= sqrt_threshold;
    if below_threshold {
        log::warn!(
            "budget {budget} is below the ladder threshold 4 sqrt(M/mu) J = {sqrt_threshold:.1}; running anyway"
        );
    }
    let alpha = grad_map_alpha_default(mu, m)?;
    let stages = depth.max(1);
    let inner_m = 2.0 * (m + mu);
    let dim = w0.len();

    let mut reg = Regularized::new(oracle);
    reg.push_anchor(mu, w0.to_vec());
    let mut w_hat = w0.to_vec();
    let mut mu_stage = mu;
    let mut report = Sgd3Report {
        depth,
        stage_mu: Vec::with_capacity(stages),
        stage_budgets: Vec::with_capacity(stages),
        stage_grad_map_norms: Vec::new(),
        alpha,
        sqrt_threshold,
        log_threshold,
        below_threshold,
    };
    let mut grad = vec![0.0; dim];
    for j in 1..=stages {
        let mut b = budget / stages;
        if j == stages {
            b += budget % stages;
        }
        w_hat = match inner {
            InnerSolver::AcSa => run_ac_sa(&mut reg, &w_hat, mu_stage, inner_m, b, monitor),
            InnerSolver::AcSa2 => run_ac_sa2(&mut reg, &w_hat, mu_stage, inner_m, b, monitor),
        };
        report.stage_mu.push(mu_stage);
        report.stage_budgets.push(b);
        if reg.inner.full_gradient(&w_hat, &mut grad) {
            report
                .stage_grad_map_norms
                .push(gradient_mapping_norm_flat(&w_hat, &grad, alpha));
        }
        mu_stage *= 2.0;
        if j < stages {
            reg.push_anchor(mu_stage, w_hat.clone());
        }
    }
    Ok((w_hat, report))
}
