use serde::{Deserialize, Serialize};

use super::{check_start, FirstOrderOracle, Monitor};
use crate::error::{invalid, Result};

/// Step size `eta_t` for `t = 1, 2, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSchedule {
    Constant(f64),
    /// `c / sqrt(t)`
    InverseSqrt(f64),
    /// `c / (t + t0)`
    InverseLinear { c: f64, t0: f64 },
}

impl StepSchedule {
    pub fn step(&self, t: usize) -> f64 {
        let tf = t as f64;
        match *self {
            StepSchedule::Constant(c) => c,
            StepSchedule::InverseSqrt(c) => c / tf.sqrt(),
            StepSchedule::InverseLinear { c, t0 } => c / (tf + t0),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Constant(c) | StepSchedule::InverseSqrt(c) => c > 0.0 && c.is_finite(),
            StepSchedule::InverseLinear { c, t0 } => c > 0.0 && c.is_finite() && t0 > -1.0 && t0.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(invalid(format!("step sizes must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PsgdOutput {
    pub last: Vec<f64>,
    /// Uniform average of `w_1, ..., w_T`.
    pub average: Vec<f64>,
}

/// `w_{t+1} = (w_t - eta_t g_t)_+`.
pub fn projected_sgd<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    schedule: StepSchedule,
    budget: usize,
) -> Result<PsgdOutput> {
    projected_sgd_monitored(oracle, w0, schedule, budget, &mut Monitor::silent())
}

pub fn projected_sgd_monitored<O: FirstOrderOracle + ?Sized>(
    oracle: &mut O,
    w0: &[f64],
    schedule: StepSchedule,
    budget: usize,
    monitor: &mut Monitor<'_>,
) -> Result<PsgdOutput> {
    check_start(oracle, w0, budget)?;
    schedule.validate()?;
    let d = w0.len();
    let mut w = w0.to_vec();
    let mut sum = vec![0.0; d];
    let mut g = vec![0.0; d];
    for t in 1..=budget {
        oracle.sample_gradient(&w, &mut g);
        let eta = schedule.step(t);
        for i in 0..d {
            w[i] = (w[i] - eta * g[i]).max(0.0);
            sum[i] += w[i];
        }
        monitor.tick(&w);
    }
    let average = sum.iter().map(|s| s / budget as f64).collect();
    Ok(PsgdOutput { last: w, average })
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::*;
    use crate::optim::ExactOracle;

    #[test]
    fn zero_gradient_keeps_start() {
        let mut o = ExactOracle::new(2, |_: &[f64], out: &mut [f64]| out.fill(0.0));
        let out = projected_sgd(&mut o, &[0.3, 1.7], StepSchedule::InverseSqrt(1.0), 50).unwrap();
        assert_eq!(out.last, vec![0.3, 1.7]);
        assert!(dist(&out.average, &[0.3, 1.7]) < 1e-14);
    }

    #[test]
    fn one_dimensional_geometric_rate() {
        // w_{t+1} - w* = (1 - c/M)(w_t - w*) with an interior minimizer
        let (c, m, target) = (0.5, 2.0, 3.0);
        let mut o = diag_quadratic(vec![c], vec![target]);
        let w0 = 10.0;
        for t in [1usize, 5, 25] {
            let out = projected_sgd(&mut o, &[w0], StepSchedule::Constant(1.0 / m), t).unwrap();
            let expected = target + (1.0 - c / m).powi(t as i32) * (w0 - target);
            assert!((out.last[0] - expected).abs() < 1e-12);
        }
        // exterior minimizer: clamps to 0 and stays
        let mut o = diag_quadratic(vec![c], vec![-1.0]);
        let out = projected_sgd(&mut o, &[10.0], StepSchedule::Constant(1.0 / m), 200).unwrap();
        assert!(out.last[0].abs() < 1e-12);
    }

    #[test]
    fn iterates_stay_feasible() {
        let mut o = diag_quadratic(vec![1.0, 1.0], vec![-5.0, 2.0]);
        let mut bad = false;
        let mut sink = |_: usize, w: &[f64]| bad |= w.iter().any(|v| *v < 0.0);
        let mut mon = Monitor::new(1, &mut sink).unwrap();
        projected_sgd_monitored(&mut o, &[1.0, 1.0], StepSchedule::Constant(1.9), 100, &mut mon).unwrap();
        drop(mon);
        assert!(!bad);
    }

    #[test]
    fn schedules_and_errors() {
        assert_eq!(StepSchedule::InverseSqrt(2.0).step(4), 1.0);
        assert_eq!(StepSchedule::InverseLinear { c: 3.0, t0: 2.0 }.step(1), 1.0);
        let mut o = diag_quadratic(vec![1.0], vec![0.0]);
        assert!(projected_sgd(&mut o, &[1.0], StepSchedule::Constant(0.0), 3).is_err());
        assert!(projected_sgd(&mut o, &[1.0], StepSchedule::Constant(1.0), 0).is_err());
    }
}
