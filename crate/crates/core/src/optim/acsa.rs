use super::{check_curvature, check_start, FirstOrderOracle, Monitor};
use crate::error::Result;

/// AC-SA on the nonnegative orthant; returns the aggregated iterate.
pub fn ac_sa<O: FirstOrderOracle + ?Sized>(oracle: &mut O, w0: &[f64], mu: f64, m: f64, budget: usize) -> Result<Vec<f64>> {
    ac_sa_monitored(oracle, w0, mu, m, budget, &mut Monitor::silent())
}

pub fn ac_sa_monitored<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    monitor: &mut Monitor<'_>,
) -> Result<Vec<f64>> {
    check_start(oracle, w0, budget)?;
    check_curvature(mu, m)?;
    Ok(run_ac_sa(oracle, w0, mu, m, budget, monitor))
}

/// Two chained AC-SA runs of `budget / 2` and `budget - budget / 2` steps.
pub fn ac_sa2<O: FirstOrderOracle + ?Sized>(oracle: &mut O, w0: &[f64], mu: f64, m: f64, budget: usize) -> Result<Vec<f64>> {
    ac_sa2_monitored(oracle, w0, mu, m, budget, &mut Monitor::silent())
}

pub fn ac_sa2_monitored<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    monitor: &mut Monitor<'_>,
) -> Result<Vec<f64>> {
    check_start(oracle, w0, budget)?;
    check_curvature(mu, m)?;
    Ok(run_ac_sa2(oracle, w0, mu, m, budget, monitor))
}

pub(crate) fn run_ac_sa2<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    monitor: &mut Monitor<'_>,
) -> Vec<f64> {
    let first = budget / 2;
    let w1 = run_ac_sa(oracle, w0, mu, m, first, monitor);
    run_ac_sa(oracle, &w1, mu, m, budget - first, monitor)
}

/// Step weights of one AC-SA iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct AcSaStep {
    pub alpha: f64,
    pub gamma: f64,
    /// Weights of `w_ag` and `w` in the middle point.
    pub md_ag: f64,
    pub md_w: f64,
}

impl AcSaStep {
    pub(crate) fn at(t: usize, mu: f64, m: f64) -> Self {
        let tf = t as f64;
        let alpha = 2.0 / (tf + 1.0);
        let gamma = 4.0 * m / (tf * (tf + 1.0));
        let (md_ag, md_w) = if t == 1 {
            // alpha = 1 drops the aggregate; the printed ratio is 0/0 when m = 0
            (0.0, 1.0)
        } else {
            let denom = gamma + (1.0 - alpha * alpha) * mu;
            (
                (1.0 - alpha) * (mu + gamma) / denom,
                alpha * ((1.0 - alpha) * mu + gamma) / denom,
            )
        };
        Self {
            alpha,
            gamma,
            md_ag,
            md_w,
        }
    }
}

/// Unchecked AC-SA; a zero budget returns `w0`.
pub(crate) fn run_ac_sa<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    mu: f64,
    m: f64,
    budget: usize,
    monitor: &mut Monitor<'_>,
) -> Vec<f64> {
    let d = w0.len();
    let mut w = w0.to_vec();
    let mut w_ag = w0.to_vec();
    let mut w_md = vec![0.0; d];
    let mut g = vec![0.0; d];
    for t in 1..=budget {
        let step = AcSaStep::at(t, mu, m);
        for i in 0..d {
            w_md[i] = step.md_ag * w_ag[i] + step.md_w * w[i];
        }
        oracle.sample_gradient(&w_md, &mut g);
        let denom = mu + step.gamma;
        let keep = ((1.0 - step.alpha) * mu + step.gamma) / denom;
        let pull = step.alpha * mu / denom;
        let lr = step.alpha / denom;
        for i in 0..d {
            w[i] = (keep * w[i] + pull * w_md[i] - lr * g[i]).max(0.0);
            w_ag[i] = step.alpha * w[i] + (1.0 - step.alpha) * w_ag[i];
        }
        monitor.tick(&w_ag);
    }
    w_ag
}
