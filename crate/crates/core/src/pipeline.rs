//! End-to-end post-processing: parameter defaults, predictors, pool
//! construction, the optimizer run and the resulting randomized policy.

use std::path::PathBuf;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::base_models::{fit_least_squares, fit_logistic, FeatureMatrix, LinearModel, LogisticConfig, MulticlassLogistic};
use crate::dual::{
    clipped_gradient_norm, full_gradient, gradient_mapping, objective_value, sigma_squared, smoothness_constant,
    DualOracle, DualVars, FeaturePool, ProblemParams,
};
use crate::error::{check_len, invalid, Error, Result};
use crate::eval::{empirical_risk, ks_unfairness, ks_unfairness_deterministic, deterministic_risk, MetricsReport, PredictionTable};
use crate::io::{synthetic_group, synthetic_regression, Dataset};
use crate::math::{policy_probs, r_vector, t_vector, Grid, SimplexVector};
use crate::optim::{self, ladder_depth, Method, Monitor, OptimizerConfig, Sgd3Report};

/// Point regression `eta(x)` and group posterior `tau(x)` used to build the pool.
pub trait Predictors {
    fn groups(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Bound `B` of the prediction range.
    fn bound(&self) -> f64;
    fn eta(&self, x: &[f64]) -> Result<f64>;
    fn tau(&self, x: &[f64]) -> Result<SimplexVector>;
    /// True when `tau` is the exact posterior, so the variance bound is
    /// `sum_s (1 - p_s) / p_s` instead of its pool estimate.
    fn exact(&self) -> bool {
        false
    }
}

/// Fitted least-squares regressor and logistic classifier, with optional
/// calibration factors applied to the class probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginPredictors {
    pub regressor: LinearModel,
    pub classifier: MulticlassLogistic,
    #[serde(default)]
    pub calibration: Option<Vec<f64>>,
}

impl PluginPredictors {
    pub fn new(regressor: LinearModel, classifier: MulticlassLogistic) -> Result<Self> {
        regressor.validate()?;
        classifier.validate()?;
        check_len("classifier input", regressor.dim(), classifier.dim)?;
        Ok(Self {
            regressor,
            classifier,
            calibration: None,
        })
    }

    /// Rescales `tau` so that its pool average matches `p` (iterative
    /// proportional fitting on the class factors).
    pub fn calibrate(&mut self, features: &FeatureMatrix, p: &SimplexVector) -> Result<()> {
        check_len("calibration groups", self.classifier.classes, p.len())?;
        if features.n_rows() == 0 {
            return Err(Error::Empty("calibration sample".into()));
        }
        let raw: Vec<SimplexVector> = features.rows().map(|x| self.classifier.predict_proba(x)).collect::<Result<_>>()?;
        let k = p.len();
        let mut c = vec![1.0; k];
        for _ in 0..500 {
            let mut mean = vec![0.0; k];
            for tau in &raw {
                let z: f64 = tau.as_slice().iter().zip(&c).map(|(t, ci)| t * ci).sum();
                for s in 0..k {
                    mean[s] += c[s] * tau[s] / z;
                }
            }
            let mut gap = 0.0f64;
            for s in 0..k {
                mean[s] /= raw.len() as f64;
                gap = gap.max((mean[s] - p[s]).abs());
                c[s] *= p[s] / mean[s].max(f64::MIN_POSITIVE);
            }
            if gap < 1e-12 {
                break;
            }
        }
        if c.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(invalid("posterior calibration diverged"));
        }
        self.calibration = Some(c);
        Ok(())
    }
}

impl Predictors for PluginPredictors {
    fn groups(&self) -> usize {
        self.classifier.classes
    }

    fn feature_dim(&self) -> usize {
        self.regressor.dim()
    }

    fn bound(&self) -> f64 {
        self.regressor.clamp_bound
    }

    fn eta(&self, x: &[f64]) -> Result<f64> {
        self.regressor.predict(x)
    }

    fn tau(&self, x: &[f64]) -> Result<SimplexVector> {
        let tau = self.classifier.predict_proba(x)?;
        match &self.calibration {
            None => Ok(tau),
            Some(c) => {
                let w: Vec<f64> = tau.as_slice().iter().zip(c).map(|(t, ci)| t * ci).collect();
                let z: f64 = w.iter().sum();
                SimplexVector::new(w.into_iter().map(|v| v / z).collect())
            }
        }
    }
}

/// The synthetic generator's own regression function and (deterministic)
/// group assignment, for tests with known `eta` and `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticTruth {
    pub bound: f64,
}

impl Predictors for SyntheticTruth {
    fn groups(&self) -> usize {
        4
    }

    fn feature_dim(&self) -> usize {
        3
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn eta(&self, x: &[f64]) -> Result<f64> {
        check_len("synthetic features", 3, x.len())?;
        Ok(synthetic_regression(x).clamp(-self.bound, self.bound))
    }

    fn tau(&self, x: &[f64]) -> Result<SimplexVector> {
        check_len("synthetic features", 3, x.len())?;
        let mut v = vec![0.0; 4];
        v[synthetic_group(x[0])] = 1.0;
        SimplexVector::new(v)
    }

    fn exact(&self) -> bool {
        true
    }
}

/// Parameters derived from the oracle budget `T` and the variance bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefaultParams {
    pub beta: f64,
    /// `L`; the grid has `2L + 1` atoms.
    pub half: usize,
    pub mu: f64,
    pub m: f64,
    /// Gradient-mapping step `1 / (2^(J+2) mu)`; absent when `mu = 0`.
    pub alpha: Option<f64>,
    pub depth: usize,
    /// `beta < 1` made `mu > M`; `mu` was lowered to `M`.
    pub mu_clamped: bool,
}

/// `beta = T / (8 log2 T)`, `L = max(1, floor(sqrt T))`, `mu = 2 sigma^2 / beta`,
/// `M = 2 beta sigma^2`.
pub fn default_params(budget: usize, sigma2: f64) -> Result<DefaultParams> {
    if budget < 2 {
        return Err(invalid(format!("oracle budget must be at least 2, got {budget}")));
    }
    let t = budget as f64;
    let beta = t / (8.0 * t.log2());
    let half = (t.sqrt().floor() as usize).max(1);
    derived_params(beta, half, sigma2)
}

/// Curvature constants for explicit `beta` and `L`.
pub fn derived_params(beta: f64, half: usize, sigma2: f64) -> Result<DefaultParams> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(invalid(format!("variance bound must be nonnegative, got {sigma2}")));
    }
    let m = smoothness_constant(beta, sigma2);
    let mut mu = 2.0 * sigma2 / beta;
    let mu_clamped = mu > m;
    if mu_clamped {
        log::warn!("beta = {beta:.3} < 1 gives mu > M; using mu = M = {m:.3e}");
        mu = m;
    }
    let (alpha, depth) = if mu > 0.0 {
        let depth = ladder_depth(mu, m);
        (Some(1.0 / (2f64.powi(depth as i32 + 2) * mu)), depth)
    } else {
        (None, 0)
    };
    Ok(DefaultParams {
        beta,
        half,
        mu,
        m,
        alpha,
        depth,
        mu_clamped,
    })
}

/// Empirical group frequencies; every one of the `k` groups must occur.
pub fn estimate_marginals(labels: &[usize], k: usize) -> Result<SimplexVector> {
    if labels.is_empty() {
        return Err(Error::Empty("sensitive labels".into()));
    }
    let mut counts = vec![0usize; k];
    for &s in labels {
        if s >= k {
            return Err(Error::OutOfRange {
                value: s as f64,
                bound: k as f64 - 1.0,
            });
        }
        counts[s] += 1;
    }
    if let Some(s) = counts.iter().position(|c| *c == 0) {
        return Err(Error::DegenerateGroup(format!("group {s} has no members")));
    }
    let n = labels.len() as f64;
    SimplexVector::new(counts.into_iter().map(|c| c as f64 / n).collect())
}

/// One `(t(x), r(x))` row per feature row, with `eta` clamped to `[-B, B]`.
pub fn build_pool<P: Predictors + ?Sized>(features: &FeatureMatrix, predictors: &P, params: &ProblemParams) -> Result<FeaturePool> {
    check_len("feature dimension", predictors.feature_dim(), features.n_cols())?;
    check_len("predictor groups", params.groups(), predictors.groups())?;
    let b = params.grid.bound();
    let mut pool = FeaturePool::new(params.groups(), params.atoms());
    for x in features.rows() {
        let t = t_vector(&predictors.tau(x)?, &params.p)?;
        let r = r_vector(predictors.eta(x)?.clamp(-b, b), &params.grid);
        pool.push(&t, &r)?;
    }
    Ok(pool)
}

/// Settings of one post-processing run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    /// Theory budget `T`, which fixes `beta` and `L`.
    pub budget: usize,
    /// Oracle calls actually spent; defaults to `budget`.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub half: Option<usize>,
    #[serde(default)]
    pub beta: Option<f64>,
    /// One value per group, or a single value for all groups.
    pub eps: Vec<f64>,
    pub method: Method,
    pub seed: u64,
    #[serde(default)]
    pub record_every: Option<usize>,
    /// Overrides the predictors' bound.
    #[serde(default)]
    pub bound: Option<f64>,
}

impl PostprocessConfig {
    pub fn new(budget: usize, eps: f64) -> Self {
        Self {
            budget,
            iterations: None,
            half: None,
            beta: None,
            eps: vec![eps],
            method: Method::Sgd3AcSa,
            seed: 0,
            record_every: None,
            bound: None,
        }
    }

    fn eps_for(&self, k: usize) -> Result<Vec<f64>> {
        match self.eps.len() {
            1 => Ok(vec![self.eps[0]; k]),
            n if n == k => Ok(self.eps.clone()),
            n => Err(Error::DimensionMismatch {
                context: "eps".into(),
                expected: k,
                got: n,
            }),
        }
    }
}

/// A labeled evaluation sample used for the metric history.
#[derive(Debug, Clone, Copy)]
pub struct EvalSet<'a> {
    pub features: &'a FeatureMatrix,
    pub sensitive: &'a [usize],
    pub targets: &'a [f64],
}

impl<'a> EvalSet<'a> {
    pub fn from_dataset(ds: &'a Dataset) -> Result<Self> {
        Ok(Self {
            features: &ds.features,
            sensitive: ds.sensitive()?,
            targets: ds.targets()?,
        })
    }
}

/// Constants and diagnostics of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub budget: usize,
    pub iterations: usize,
    pub seed: u64,
    pub sigma2: f64,
    pub params: DefaultParams,
    /// Optimization was skipped because the dual gradient is constant.
    pub skipped: bool,
    pub sgd3: Option<Sgd3Report>,
}

#[derive(Debug, Clone)]
pub struct PostprocessOutput<P> {
    pub policy: FairPolicy<P>,
    pub history: Vec<MetricsReport>,
    pub summary: RunSummary,
}

/// Randomized prediction rule `pi(l | x)` from fitted multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct FairPolicy<P> {
    pub dual: DualVars,
    pub params: ProblemParams,
    pub predictors: P,
}

impl<P: Predictors> FairPolicy<P> {
    pub fn new(dual: DualVars, params: ProblemParams, predictors: P) -> Result<Self> {
        check_len("dual atoms", params.atoms(), dual.atoms())?;
        check_len("dual groups", params.groups(), dual.groups())?;
        check_len("predictor groups", params.groups(), predictors.groups())?;
        Ok(Self { dual, params, predictors })
    }

    pub fn grid(&self) -> &Grid {
        &self.params.grid
    }

    /// Grid atoms and their probabilities at `x`.
    pub fn predict_distribution(&self, x: &[f64]) -> Result<(&[f64], SimplexVector)> {
        check_len("feature dimension", self.predictors.feature_dim(), x.len())?;
        let b = self.params.grid.bound();
        let t = t_vector(&self.predictors.tau(x)?, &self.params.p)?;
        let r = r_vector(self.predictors.eta(x)?.clamp(-b, b), &self.params.grid);
        let probs = policy_probs(&self.dual, &t, &r, self.params.beta)?;
        Ok((self.params.grid.atoms(), probs))
    }

    pub fn sample_prediction<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<f64> {
        let (atoms, probs) = self.predict_distribution(x)?;
        let dist = WeightedIndex::new(probs.as_slice()).map_err(|e| invalid(format!("policy distribution: {e}")))?;
        Ok(atoms[dist.sample(rng)])
    }

    pub fn prediction_table(&self, features: &FeatureMatrix) -> Result<PredictionTable> {
        let rows: Vec<SimplexVector> = features.rows().map(|x| self.predict_distribution(x).map(|d| d.1)).collect::<Result<_>>()?;
        PredictionTable::from_rows(self.params.grid.atoms().to_vec(), &rows)
    }
}

/// Risk and per-group KS unfairness of a policy on a labeled sample.
pub fn evaluate_policy<P: Predictors>(policy: &FairPolicy<P>, eval: EvalSet<'_>) -> Result<(f64, Vec<f64>)> {
    let table = policy.prediction_table(eval.features)?;
    Ok((
        empirical_risk(&table, eval.targets)?,
        ks_unfairness(&table, eval.sensitive, policy.params.groups())?,
    ))
}

/// Risk and per-group KS unfairness of the (deterministic) base regressor.
pub fn evaluate_base<P: Predictors + ?Sized>(predictors: &P, eval: EvalSet<'_>) -> Result<(f64, Vec<f64>)> {
    let preds: Vec<f64> = eval.features.rows().map(|x| predictors.eta(x)).collect::<Result<_>>()?;
    Ok((
        deterministic_risk(&preds, eval.targets)?,
        ks_unfairness_deterministic(&preds, eval.sensitive, predictors.groups())?,
    ))
}

/// Upper bound on the pool risk of the policy at `dual`:
/// `-F + ||w|| ||G_alpha(w)|| + log(2L+1) / beta`. Valid whenever `alpha` is
/// small enough that no positive coordinate is clipped by the mapping.
pub fn dual_risk_certificate(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool, alpha: f64) -> Result<f64> {
    let f = objective_value(dual, params, pool)?;
    let g = full_gradient(dual, params, pool)?;
    let gm = gradient_mapping(dual, &g, alpha)?;
    Ok(-f + dual.norm() * gm.norm() + (params.atoms() as f64).ln() / params.beta)
}

/// Runs the selected optimizer on the pool of `features` from zero
/// multipliers. With an evaluation set, risk and KS unfairness are recorded
/// at the start and every `record_every` oracle calls; without one the pool
/// risk is recorded and KS is left empty.
pub fn dp_postprocess<P: Predictors>(
    config: &PostprocessConfig,
    p: SimplexVector,
    predictors: P,
    features: &FeatureMatrix,
    eval: Option<EvalSet<'_>>,
) -> Result<PostprocessOutput<P>> {
    let k = p.len();
    check_len("predictor groups", k, predictors.groups())?;
    let eps = config.eps_for(k)?;
    let bound = config.bound.unwrap_or_else(|| predictors.bound());
    let theory = default_params(config.budget, 1.0)?;
    let beta = config.beta.unwrap_or(theory.beta);
    let half = config.half.unwrap_or(theory.half);
    let grid = Grid::new(bound, half)?;
    let params = ProblemParams::new(beta, eps, p, grid)?;
    let pool = build_pool(features, &predictors, &params)?;
    if pool.is_empty() {
        return Err(Error::Empty("unlabeled sample".into()));
    }
    let sigma2 = if predictors.exact() {
        sigma_squared(&params.p)?
    } else {
        pool.mean_t_norm_sq()
    };
    let derived = derived_params(beta, half, sigma2)?;
    let iterations = config.iterations.unwrap_or(config.budget).max(1);
    let skipped = k == 1 || sigma2 == 0.0;
    if skipped {
        log::info!("dual gradient is constant (K = {k}, sigma^2 = {sigma2}); skipping optimization");
    }

    let eval_pool = match eval {
        Some(e) => {
            check_len("evaluation labels", e.features.n_rows(), e.sensitive.len())?;
            check_len("evaluation targets", e.features.n_rows(), e.targets.len())?;
            Some((build_pool(e.features, &predictors, &params)?, e))
        }
        None => None,
    };
    let alpha = derived.alpha.unwrap_or(1.0);
    let record = |calls: usize, step: usize, w: &[f64]| -> Result<MetricsReport> {
        let dual = DualVars::from_flat(params.atoms(), k, w.to_vec())?;
        let g = full_gradient(&dual, &params, &pool)?;
        let (risk, ks) = match &eval_pool {
            Some((ep, e)) => {
                let table = PredictionTable::from_pool(&dual, &params, ep)?;
                (empirical_risk(&table, e.targets)?, ks_unfairness(&table, e.sensitive, k)?)
            }
            None => (crate::eval::pool_risk(&PredictionTable::from_pool(&dual, &params, &pool)?, &pool)?, Vec::new()),
        };
        Ok(MetricsReport {
            step,
            oracle_calls: calls,
            risk,
            ks_unfairness: ks,
            clipped_unfairness_norm: clipped_gradient_norm(&g),
            gradient_map_norm: gradient_mapping(&dual, &g, alpha)?.norm(),
        })
    };

    let zero = vec![0.0; params.dual_dim()];
    let mut history = Vec::new();
    if config.record_every.is_some() {
        history.push(record(0, 0, &zero)?);
    }
    let (point, sgd3) = if skipped {
        (zero, None)
    } else {
        let mut failure: Option<Error> = None;
        let mut sink = |calls: usize, w: &[f64]| {
            if failure.is_none() {
                match record(calls, history.len(), w) {
                    Ok(r) => history.push(r),
                    Err(e) => failure = Some(e),
                }
            }
        };
        let mut monitor = match config.record_every {
            Some(every) => Monitor::new(every, &mut sink)?,
            None => Monitor::silent(),
        };
        let mut oracle = DualOracle::new(&params, &pool, config.seed)?;
        let opt = OptimizerConfig {
            budget: iterations,
            mu: derived.mu,
            smoothness: derived.m,
            seed: config.seed,
            record_every: config.record_every.unwrap_or(usize::MAX),
        };
        let out = optim::run(config.method, &mut oracle, &zero, &opt, &mut monitor)?;
        drop(monitor);
        if let Some(e) = failure {
            return Err(e);
        }
        (out.point, out.sgd3)
    };
    let dual = DualVars::from_flat(params.atoms(), k, point)?;
    let summary = RunSummary {
        method: config.method,
        budget: config.budget,
        iterations,
        seed: config.seed,
        sigma2,
        params: derived,
        skipped,
        sgd3,
    };
    Ok(PostprocessOutput {
        policy: FairPolicy::new(dual, params, predictors)?,
        history,
        summary,
    })
}

/// `max |y|` over the training targets, but at least 1.
pub fn default_bound(targets: &[f64]) -> f64 {
    targets.iter().fold(1.0f64, |b, y| b.max(y.abs()))
}

/// Settings for fitting the base predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub ridge: f64,
    pub logistic: LogisticConfig,
    /// Defaults to [`default_bound`] of the training targets.
    pub bound: Option<f64>,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            ridge: 0.0,
            logistic: LogisticConfig::default(),
            bound: None,
        }
    }
}

/// Fits `eta` by least squares and `tau` by multinomial logistic regression
/// on a labeled training set.
pub fn fit_base(train: &Dataset, config: &BaseConfig) -> Result<PluginPredictors> {
    let targets = train.targets()?;
    let bound = config.bound.unwrap_or_else(|| default_bound(targets));
    let regressor = fit_least_squares(&train.features, targets, config.ridge, bound)?;
    let classifier = fit_logistic(&train.features, train.sensitive()?, train.groups(), &config.logistic)?.model;
    PluginPredictors::new(regressor, classifier)
}

/// JSON form of a fitted policy. Base models are referenced by path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub grid: Grid,
    pub beta: f64,
    pub eps: Vec<f64>,
    pub p: SimplexVector,
    pub dual: DualVars,
    pub regressor: PathBuf,
    pub classifier: PathBuf,
    #[serde(default)]
    pub calibration: Option<Vec<f64>>,
    #[serde(default)]
    pub feature_names: Vec<String>,
    #[serde(default)]
    pub group_labels: Vec<String>,
    #[serde(default)]
    pub summary: Option<RunSummary>,
}

impl PolicyDocument {
    pub fn params(&self) -> Result<ProblemParams> {
        ProblemParams::new(self.beta, self.eps.clone(), self.p.clone(), self.grid.clone())
    }

    /// Rebuilds the policy from the already loaded base models.
    pub fn into_policy(self, regressor: LinearModel, classifier: MulticlassLogistic) -> Result<FairPolicy<PluginPredictors>> {
        let params = self.params()?;
        let mut predictors = PluginPredictors::new(regressor, classifier)?;
        if let Some(c) = self.calibration {
            check_len("calibration factors", predictors.groups(), c.len())?;
            predictors.calibration = Some(c);
        }
        FairPolicy::new(self.dual, params, predictors)
    }
}
