//! The smooth dual objective over nonnegative multiplier matrices, its exact
//! and single-sample gradients, the orthant projection and the gradient
//! mapping used as a stationarity measure.
//!
//! Multipliers are stored flat: the `lambda` block (atom-major, `atoms x K`)
//! followed by the `nu` block with the same layout. Optimizers see this flat
//! vector directly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math::{
    check_marginals, lse_unchecked, policy_scores_into, r_vector, softmax_in_place, t_vector,
    CompensatedSum, Grid, SimplexVector,
};
use crate::optim::FirstOrderOracle;

/// A pair of `atoms x K` matrices `(lambda, nu)` with no sign constraint.
/// Used for gradients, gradient mappings and unprojected steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualPair {
    atoms: usize,
    groups: usize,
    data: Vec<f64>,
}

impl DualPair {
    pub fn zeros(atoms: usize, groups: usize) -> Self {
        Self {
            atoms,
            groups,
            data: vec![0.0; 2 * atoms * groups],
        }
    }

    pub fn from_flat(atoms: usize, groups: usize, data: Vec<f64>) -> Result<Self> {
        check_len("dual pair storage", 2 * atoms * groups, data.len())?;
        Ok(Self { atoms, groups, data })
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn lambda(&self, l: usize, s: usize) -> f64 {
        self.data[l * self.groups + s]
    }

    pub fn nu(&self, l: usize, s: usize) -> f64 {
        self.data[(self.atoms + l) * self.groups + s]
    }

    pub fn lambda_block(&self) -> &[f64] {
        &self.data[..self.atoms * self.groups]
    }

    pub fn nu_block(&self) -> &[f64] {
        &self.data[self.atoms * self.groups..]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &DualPair) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn same_shape(&self, other_atoms: usize, other_groups: usize, context: &'static str) -> Result<()> {
        check_len(context, self.atoms, other_atoms)?;
        check_len(context, self.groups, other_groups)
    }
}

/// Feasible multipliers: every entry of `lambda` and `nu` is nonnegative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DualPair", into = "DualPair")]
pub struct DualVars(DualPair);

impl TryFrom<DualPair> for DualVars {
    type Error = Error;
    fn try_from(pair: DualPair) -> Result<Self> {
        DualVars::new(pair)
    }
}

impl From<DualVars> for DualPair {
    fn from(d: DualVars) -> Self {
        d.0
    }
}

impl DualVars {
    pub fn zeros(atoms: usize, groups: usize) -> Self {
        Self(DualPair::zeros(atoms, groups))
    }

    pub fn new(pair: DualPair) -> Result<Self> {
        if let Some(v) = pair.data.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!("dual variables must be finite and nonnegative, found {v}")));
        }
        Ok(Self(pair))
    }

    pub fn from_flat(atoms: usize, groups: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(DualPair::from_flat(atoms, groups, data)?)
    }

    pub fn pair(&self) -> &DualPair {
        &self.0
    }

    pub fn atoms(&self) -> usize {
        self.0.atoms
    }

    pub fn groups(&self) -> usize {
        self.0.groups
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0.data
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// Inputs fixed for one post-processing problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemParams {
    pub beta: f64,
    pub eps: Vec<f64>,
    pub p: SimplexVector,
    pub grid: Grid,
}

impl ProblemParams {
    pub fn new(beta: f64, eps: Vec<f64>, p: SimplexVector, grid: Grid) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        check_len("slack vector", p.len(), eps.len())?;
        if let Some(e) = eps.iter().find(|e| !(0.0..=1.0).contains(*e)) {
            return Err(invalid(format!("slack {e} outside [0, 1]")));
        }
        check_marginals(&p)?;
        Ok(Self { beta, eps, p, grid })
    }

    /// Number of groups `K`.
    pub fn groups(&self) -> usize {
        self.p.len()
    }

    pub fn atoms(&self) -> usize {
        self.grid.len()
    }

    /// Length of the flattened `(lambda, nu)` vector.
    pub fn dual_dim(&self) -> usize {
        2 * self.atoms() * self.groups()
    }
}

/// One pool row: `t(x)` (length K) and `r(x)` (length 2L+1).
#[derive(Debug, Clone, Copy)]
pub struct PoolRow<'a> {
    pub t: &'a [f64],
    pub r: &'a [f64],
}

/// Precomputed `(t(x), r(x))` rows over an unlabeled sample. Its uniform
/// empirical measure stands in for the feature distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePool {
    groups: usize,
    atoms: usize,
    t: Vec<f64>,
    r: Vec<f64>,
}

impl FeaturePool {
    pub fn new(groups: usize, atoms: usize) -> Self {
        Self {
            groups,
            atoms,
            t: Vec::new(),
            r: Vec::new(),
        }
    }

    pub fn push(&mut self, t: &[f64], r: &[f64]) -> Result<()> {
        check_len("pool row t", self.groups, t.len())?;
        check_len("pool row r", self.atoms, r.len())?;
        if r.iter().any(|v| !(*v >= 0.0)) || t.iter().any(|v| !v.is_finite()) {
            return Err(invalid("pool rows need finite t and nonnegative r"));
        }
        self.t.extend_from_slice(t);
        self.r.extend_from_slice(r);
        Ok(())
    }

    /// Builds rows from point predictions `eta(x)` (clamped to `[-B, B]`) and
    /// group posteriors `tau(x)`.
    pub fn from_predictions<'a>(
        eta: impl IntoIterator<Item = f64>,
        tau: impl IntoIterator<Item = &'a SimplexVector>,
        p: &SimplexVector,
        grid: &Grid,
    ) -> Result<Self> {
        let mut pool = Self::new(p.len(), grid.len());
        let b = grid.bound();
        let mut tau = tau.into_iter();
        for e in eta {
            let tau_x = tau
                .next()
                .ok_or_else(|| invalid("fewer posterior rows than regression outputs"))?;
            let t = t_vector(tau_x, p)?;
            let r = r_vector(e.clamp(-b, b), grid);
            pool.push(&t, &r)?;
        }
        if tau.next().is_some() {
            return Err(invalid("more posterior rows than regression outputs"));
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        if self.groups == 0 {
            0
        } else {
            self.t.len() / self.groups
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn row(&self, i: usize) -> PoolRow<'_> {
        PoolRow {
            t: &self.t[i * self.groups..(i + 1) * self.groups],
            r: &self.r[i * self.atoms..(i + 1) * self.atoms],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = PoolRow<'_>> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// Empirical mean of `||t(x)||^2` over the pool.
    pub fn mean_t_norm_sq(&self) -> f64 {
        crate::math::compensated_mean(self.rows().map(|row| row.t.iter().map(|v| v * v).sum::<f64>()))
            .unwrap_or(0.0)
    }

    fn check_against(&self, params: &ProblemParams) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Empty("feature pool".into()));
        }
        check_len("pool groups", params.groups(), self.groups)?;
        check_len("pool atoms", params.atoms(), self.atoms)
    }
}

/// `sum_s (1 - p_s) / p_s`, the variance bound for exact posteriors.
pub fn sigma_squared(p: &SimplexVector) -> Result<f64> {
    check_marginals(p)?;
    Ok(p.as_slice().iter().map(|ps| (1.0 - ps) / ps).sum::<f64>().max(0.0))
}

/// Pool average of `sum_s (p_s - tau_s(x))^2 / p_s^2` for plug-in posteriors.
pub fn sigma_hat_squared<'a>(
    tau_rows: impl IntoIterator<Item = &'a SimplexVector>,
    p: &SimplexVector,
) -> Result<f64> {
    check_marginals(p)?;
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for tau in tau_rows {
        check_len("sigma_hat_squared", p.len(), tau.len())?;
        let v: f64 = tau
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .map(|(t, ps)| (ps - t).powi(2) / (ps * ps))
            .sum();
        acc.add(v);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("posterior rows".into()));
    }
    Ok(acc.value() / n as f64)
}

/// Lipschitz constant `2 beta sigma^2` of the dual gradient.
pub fn smoothness_constant(beta: f64, sigma2: f64) -> f64 {
    2.0 * beta * sigma2
}

fn check_dual(dual: &DualVars, params: &ProblemParams) -> Result<()> {
    check_len("dual atoms", params.atoms(), dual.atoms())?;
    check_len("dual groups", params.groups(), dual.groups())
}

/// Dual objective: pool mean of `lse_beta(<lambda_l - nu_l, t> - r_l)` plus
/// `sum_l <lambda_l + nu_l, eps>`.
pub fn objective_value(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool) -> Result<f64> {
    check_dual(dual, params)?;
    pool.check_against(params)?;
    let k = params.groups();
    let mut scores = vec![0.0; params.atoms()];
    let mut acc = CompensatedSum::default();
    for row in pool.rows() {
        // unscaled scores; lse applies beta itself
        policy_scores_into(dual.as_slice(), k, row.t, row.r, 1.0, &mut scores);
        acc.add(lse_unchecked(&scores, params.beta));
    }
    let data_term = acc.value() / pool.len() as f64;
    Ok(data_term + penalty_term(dual.pair(), &params.eps))
}

fn penalty_term(dual: &DualPair, eps: &[f64]) -> f64 {
    let k = eps.len();
    let mut acc = CompensatedSum::default();
    for (i, v) in dual.data.iter().enumerate() {
        acc.add(v * eps[i % k]);
    }
    acc.value()
}

/// Scratch buffers for repeated gradient evaluations.
#[derive(Debug, Clone)]
pub(crate) struct GradientWorkspace {
    probs: Vec<f64>,
}

impl GradientWorkspace {
    pub(crate) fn new(atoms: usize) -> Self {
        Self { probs: vec![0.0; atoms] }
    }
}

/// Single-row gradient written into `out` (flat dual layout). The policy
/// weights used are exactly those of [`crate::math::policy_probs`].
pub(crate) fn stochastic_gradient_into(
    dual: &[f64],
    params: &ProblemParams,
    row: PoolRow<'_>,
    ws: &mut GradientWorkspace,
    out: &mut [f64],
) {
    let k = params.groups();
    let atoms = params.atoms();
    policy_scores_into(dual, k, row.t, row.r, params.beta, &mut ws.probs);
    softmax_in_place(&mut ws.probs);
    let (g_lam, g_nu) = out.split_at_mut(atoms * k);
    for l in 0..atoms {
        let pl = ws.probs[l];
        for s in 0..k {
            let data = pl * row.t[s];
            g_lam[l * k + s] = data + params.eps[s];
            g_nu[l * k + s] = -data + params.eps[s];
        }
    }
}

/// Gradient estimate from a single pool row.
pub fn stochastic_gradient(dual: &DualVars, params: &ProblemParams, row: PoolRow<'_>) -> Result<DualPair> {
    check_dual(dual, params)?;
    check_len("row t", params.groups(), row.t.len())?;
    check_len("row r", params.atoms(), row.r.len())?;
    let mut out = DualPair::zeros(params.atoms(), params.groups());
    let mut ws = GradientWorkspace::new(params.atoms());
    stochastic_gradient_into(dual.as_slice(), params, row, &mut ws, &mut out.data);
    Ok(out)
}

/// Exact gradient under the pool measure: compensated mean of the per-row
/// gradients.
pub(crate) fn full_gradient_into(dual: &[f64], params: &ProblemParams, pool: &FeaturePool, out: &mut [f64]) {
    let mut ws = GradientWorkspace::new(params.atoms());
    let mut row_grad = vec![0.0; out.len()];
    let mut acc = vec![CompensatedSum::default(); out.len()];
    for row in pool.rows() {
        stochastic_gradient_into(dual, params, row, &mut ws, &mut row_grad);
        for (a, g) in acc.iter_mut().zip(&row_grad) {
            a.add(*g);
        }
    }
    let n = pool.len() as f64;
    for (o, a) in out.iter_mut().zip(&acc) {
        *o = a.value() / n;
    }
}

pub fn full_gradient(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool) -> Result<DualPair> {
    check_dual(dual, params)?;
    pool.check_against(params)?;
    let mut out = DualPair::zeros(params.atoms(), params.groups());
    full_gradient_into(dual.as_slice(), params, pool, &mut out.data);
    Ok(out)
}

/// Entrywise `max(0, .)`.
pub fn project_nonneg(point: &DualPair) -> DualVars {
    let mut p = point.clone();
    for v in p.data.iter_mut() {
        *v = v.max(0.0);
    }
    DualVars(p)
}

/// `G_alpha = (w - (w - alpha * grad)_+) / alpha`.
pub fn gradient_mapping(dual: &DualVars, grad: &DualPair, alpha: f64) -> Result<DualPair> {
    if !(alpha > 0.0) {
        return Err(invalid(format!("gradient-mapping step must be positive, got {alpha}")));
    }
    grad.same_shape(dual.atoms(), dual.groups(), "gradient mapping")?;
    let mut out = grad.clone();
    gradient_mapping_into(dual.as_slice(), grad.as_slice(), alpha, &mut out.data);
    Ok(out)
}

pub(crate) fn gradient_mapping_into(w: &[f64], grad: &[f64], alpha: f64, out: &mut [f64]) {
    for ((o, wi), gi) in out.iter_mut().zip(w).zip(grad) {
        *o = (wi - (wi - alpha * gi).max(0.0)) / alpha;
    }
}

pub(crate) fn gradient_mapping_norm_flat(w: &[f64], grad: &[f64], alpha: f64) -> f64 {
    w.iter()
        .zip(grad)
        .map(|(wi, gi)| ((wi - (wi - alpha * gi).max(0.0)) / alpha).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Frobenius norm of `(-grad)_+`.
pub fn clipped_gradient_norm(grad: &DualPair) -> f64 {
    grad.data
        .iter()
        .map(|g| (-g).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Stochastic oracle for the dual objective: each sample draws one pool row
/// uniformly with replacement.
pub struct DualOracle<'a> {
    params: &'a ProblemParams,
    pool: &'a FeaturePool,
    rng: ChaCha8Rng,
    ws: GradientWorkspace,
}

impl<'a> DualOracle<'a> {
    pub fn new(params: &'a ProblemParams, pool: &'a FeaturePool, seed: u64) -> Result<Self> {
        pool.check_against(params)?;
        Ok(Self {
            params,
            pool,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ws: GradientWorkspace::new(params.atoms()),
        })
    }
}

impl FirstOrderOracle for DualOracle<'_> {
    fn dim(&self) -> usize {
        self.params.dual_dim()
    }

    fn sample_gradient(&mut self, w: &[f64], out: &mut [f64]) {
        let i = self.rng.random_range(0..self.pool.len());
        stochastic_gradient_into(w, self.params, self.pool.row(i), &mut self.ws, out);
    }

    fn full_gradient(&self, w: &[f64], out: &mut [f64]) -> bool {
        full_gradient_into(w, self.params, self.pool, out);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::policy_probs;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simplex(v: &[f64]) -> SimplexVector {
        SimplexVector::new(v.to_vec()).unwrap()
    }

    fn random_simplex(rng: &mut ChaCha8Rng, k: usize) -> SimplexVector {
        let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 0.05).collect();
        let total: f64 = raw.iter().sum();
        SimplexVector::from_raw(raw.iter().map(|v| v / total).collect())
    }

    /// Random instance with a pool-calibrated `p` (mean of the posteriors).
    fn instance(rng: &mut ChaCha8Rng, half: usize, k: usize, n: usize, beta: f64) -> (ProblemParams, FeaturePool) {
        let grid = Grid::new(1.0, half).unwrap();
        let taus: Vec<SimplexVector> = (0..n).map(|_| random_simplex(rng, k)).collect();
        let mut p = vec![0.0; k];
        for tau in &taus {
            for s in 0..k {
                p[s] += tau[s] / n as f64;
            }
        }
        let p = SimplexVector::from_raw(p);
        let eta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pool = FeaturePool::from_predictions(eta, &taus, &p, &grid).unwrap();
        let eps = (0..k).map(|_| rng.random_range(0.0..0.2)).collect();
        (ProblemParams::new(beta, eps, p, grid).unwrap(), pool)
    }

    fn random_dual(rng: &mut ChaCha8Rng, params: &ProblemParams, scale: f64) -> DualVars {
        let data = (0..params.dual_dim()).map(|_| rng.random::<f64>() * scale).collect();
        DualVars::from_flat(params.atoms(), params.groups(), data).unwrap()
    }

    #[test]
    fn sigma_squared_examples() {
        assert_eq!(sigma_squared(&simplex(&[0.5, 0.5])).unwrap(), 2.0);
        assert_eq!(sigma_squared(&simplex(&[1.0])).unwrap(), 0.0);
        assert_abs_diff_eq!(sigma_squared(&simplex(&[0.25, 0.75])).unwrap(), 10.0 / 3.0, epsilon = 1e-14);
        assert!(matches!(sigma_squared(&simplex(&[1.0, 0.0])), Err(Error::DegenerateGroup(_))));
    }

    #[test]
    fn sigma_hat_squared_examples() {
        let p = simplex(&[0.5, 0.5]);
        let rows = vec![p.clone(); 4];
        assert_eq!(sigma_hat_squared(&rows, &p).unwrap(), 0.0);
        let one = vec![simplex(&[1.0, 0.0])];
        assert_eq!(sigma_hat_squared(&one, &p).unwrap(), 2.0);
        let empty: Vec<SimplexVector> = Vec::new();
        assert!(sigma_hat_squared(&empty, &p).is_err());

        // moving every row toward p along a segment never increases it
        let far = simplex(&[0.9, 0.1]);
        let mut last = f64::INFINITY;
        for i in 0..=10 {
            let a = i as f64 / 10.0;
            let row = simplex(&[(1.0 - a) * 0.9 + a * 0.5, (1.0 - a) * 0.1 + a * 0.5]);
            let v = sigma_hat_squared([&row, &far], &p).unwrap();
            assert!(v <= last + 1e-15);
            last = v;
        }
    }

    #[test]
    fn smoothness_examples() {
        assert_eq!(smoothness_constant(1.0, 2.0), 4.0);
        assert_eq!(smoothness_constant(7.5, 0.0), 0.0);
        assert_abs_diff_eq!(smoothness_constant(12.8, 2.0), 51.2, epsilon = 1e-12);
    }

    #[test]
    fn objective_at_zero_is_mean_lse_of_neg_r() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (params, pool) = instance(&mut rng, 3, 2, 6, 4.0);
        let zero = DualVars::zeros(params.atoms(), params.groups());
        let expected: f64 = pool
            .rows()
            .map(|row| {
                let neg: Vec<f64> = row.r.iter().map(|v| -v).collect();
                crate::math::lse(&neg, params.beta).unwrap()
            })
            .sum::<f64>()
            / pool.len() as f64;
        assert_abs_diff_eq!(objective_value(&zero, &params, &pool).unwrap(), expected, epsilon = 1e-13);
    }

    #[test]
    fn penalty_term_is_linear() {
        // Adding c to every multiplier with a shared eps keeps the data term
        // and adds (2L+1) * c * K * 2 * eps.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut params, pool) = instance(&mut rng, 2, 3, 5, 2.0);
        params.eps = vec![0.05; 3];
        let base = random_dual(&mut rng, &params, 1.0);
        let c = 0.7;
        let shifted = DualVars::from_flat(
            params.atoms(),
            params.groups(),
            base.as_slice().iter().map(|v| v + c).collect(),
        )
        .unwrap();
        let diff = objective_value(&shifted, &params, &pool).unwrap() - objective_value(&base, &params, &pool).unwrap();
        let expected = params.atoms() as f64 * c * 3.0 * 2.0 * 0.05;
        assert_abs_diff_eq!(diff, expected, epsilon = 1e-12);
    }

    #[test]
    fn objective_midpoint_convexity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (params, pool) = instance(&mut rng, 2, 2, 8, 5.0);
        for _ in 0..100 {
            let a = random_dual(&mut rng, &params, 3.0);
            let b = random_dual(&mut rng, &params, 3.0);
            let mid = DualVars::from_flat(
                params.atoms(),
                params.groups(),
                a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| 0.5 * (x + y)).collect(),
            )
            .unwrap();
            let fa = objective_value(&a, &params, &pool).unwrap();
            let fb = objective_value(&b, &params, &pool).unwrap();
            let fm = objective_value(&mid, &params, &pool).unwrap();
            assert!(fm <= 0.5 * (fa + fb) + 1e-9);
        }
    }

    #[test]
    fn stochastic_gradient_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (params, pool) = instance(&mut rng, 2, 3, 4, 3.0);
        let dual = random_dual(&mut rng, &params, 2.0);
        let row = pool.row(1);
        let g = stochastic_gradient(&dual, &params, row).unwrap();
        let pi = policy_probs(&dual, row.t, row.r, params.beta).unwrap();
        for l in 0..params.atoms() {
            for s in 0..params.groups() {
                assert_abs_diff_eq!(g.lambda(l, s) + g.nu(l, s), 2.0 * params.eps[s], epsilon = 1e-15);
                assert_abs_diff_eq!(g.lambda(l, s) - params.eps[s], pi[l] * row.t[s], epsilon = 1e-15);
            }
        }
        let zero_t = vec![0.0; 3];
        let g0 = stochastic_gradient(&dual, &params, PoolRow { t: &zero_t, r: row.r }).unwrap();
        for l in 0..params.atoms() {
            for s in 0..3 {
                assert_eq!(g0.lambda(l, s), params.eps[s]);
                assert_eq!(g0.nu(l, s), params.eps[s]);
            }
        }
    }

    #[test]
    fn stochastic_gradient_matches_finite_differences_on_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (params, full) = instance(&mut rng, 2, 2, 3, 2.0);
            let mut pool = FeaturePool::new(2, params.atoms());
            let row = full.row(0);
            pool.push(row.t, row.r).unwrap();
            let dual = random_dual(&mut rng, &params, 1.0);
            let g = stochastic_gradient(&dual, &params, pool.row(0)).unwrap();
            check_fd(&dual, &params, &pool, &g);
        }
    }

    fn check_fd(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool, g: &DualPair) {
        let h = 1e-5;
        for i in 0..params.dual_dim() {
            let mut up = dual.as_slice().to_vec();
            let mut dn = dual.as_slice().to_vec();
            up[i] += h;
            dn[i] -= h;
            // Interior evaluation: shift the base point away from zero.
            let up = DualVars(DualPair::from_flat(params.atoms(), params.groups(), up).unwrap());
            let dn = DualVars(DualPair::from_flat(params.atoms(), params.groups(), dn).unwrap());
            let fd = (objective_value(&up, params, pool).unwrap() - objective_value(&dn, params, pool).unwrap()) / (2.0 * h);
            let exact = g.as_slice()[i];
            assert!(
                (fd - exact).abs() <= 1e-5 * exact.abs().max(1e-2),
                "coordinate {i}: fd {fd} vs {exact}"
            );
        }
    }

    #[test]
    fn full_gradient_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (params, pool) = instance(&mut rng, 2, 2, 5, 2.0);
        let dual = random_dual(&mut rng, &params, 1.0);

        let mut single = FeaturePool::new(2, params.atoms());
        single.push(pool.row(2).t, pool.row(2).r).unwrap();
        assert_eq!(
            full_gradient(&dual, &params, &single).unwrap(),
            stochastic_gradient(&dual, &params, single.row(0)).unwrap()
        );
        single.push(pool.row(2).t, pool.row(2).r).unwrap();
        let twice = full_gradient(&dual, &params, &single).unwrap();
        let once = stochastic_gradient(&dual, &params, pool.row(2)).unwrap();
        for (a, b) in twice.as_slice().iter().zip(once.as_slice()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-16);
        }

        let g = full_gradient(&dual, &params, &pool).unwrap();
        check_fd(&dual, &params, &pool, &g);

        let empty = FeaturePool::new(2, params.atoms());
        assert!(full_gradient(&dual, &params, &empty).is_err());
    }

    #[test]
    fn full_gradient_is_pool_average_of_row_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (params, pool) = instance(&mut rng, 3, 3, 17, 8.0);
        let dual = random_dual(&mut rng, &params, 2.0);
        let full = full_gradient(&dual, &params, &pool).unwrap();
        let mut acc = vec![CompensatedSum::default(); params.dual_dim()];
        for row in pool.rows() {
            let g = stochastic_gradient(&dual, &params, row).unwrap();
            for (a, v) in acc.iter_mut().zip(g.as_slice()) {
                a.add(*v);
            }
        }
        let avg: Vec<f64> = acc.iter().map(|a| a.value() / pool.len() as f64).collect();
        assert_eq!(full.as_slice(), avg.as_slice());
    }

    #[test]
    fn projection_examples() {
        let pair = DualPair::from_flat(1, 2, vec![1.0, 0.0, 2.5, 3.0]).unwrap();
        assert_eq!(project_nonneg(&pair).as_slice(), pair.as_slice());
        let neg = DualPair::from_flat(1, 2, vec![-3.2, 1.0, 0.5, -0.0]).unwrap();
        let p = project_nonneg(&neg);
        assert_eq!(p.as_slice()[0], 0.0);
        assert_eq!(project_nonneg(p.pair()), p);
    }

    #[test]
    fn gradient_mapping_examples() {
        let interior = DualVars::from_flat(1, 1, vec![2.0, 3.0]).unwrap();
        let zero_grad = DualPair::zeros(1, 1);
        assert_eq!(gradient_mapping(&interior, &zero_grad, 0.5).unwrap().as_slice(), &[0.0, 0.0]);

        let at_zero = DualVars::zeros(1, 1);
        let positive = DualPair::from_flat(1, 1, vec![1.5, 0.2]).unwrap();
        assert_eq!(gradient_mapping(&at_zero, &positive, 1.0).unwrap().as_slice(), &[0.0, 0.0]);

        let five = DualVars::from_flat(1, 1, vec![5.0, 5.0]).unwrap();
        let g = DualPair::from_flat(1, 1, vec![2.0, -1.0]).unwrap();
        assert_eq!(gradient_mapping(&five, &g, 1.0).unwrap().as_slice(), &[2.0, -1.0]);

        assert!(gradient_mapping(&five, &g, 0.0).is_err());
    }

    #[test]
    fn clipped_norm_examples() {
        assert_eq!(clipped_gradient_norm(&DualPair::from_flat(1, 1, vec![0.3, 2.0]).unwrap()), 0.0);
        assert_eq!(clipped_gradient_norm(&DualPair::from_flat(1, 1, vec![-2.0, 0.0]).unwrap()), 2.0);
    }

    #[test]
    fn gradient_mapping_dominates_clipped_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (params, pool) = instance(&mut rng, 2, 3, 10, 6.0);
        for _ in 0..50 {
            let mut dual = random_dual(&mut rng, &params, 1.0);
            // put some coordinates on the boundary
            let mut data = dual.as_slice().to_vec();
            for v in data.iter_mut() {
                if rng.random::<f64>() < 0.3 {
                    *v = 0.0;
                }
            }
            dual = DualVars::from_flat(params.atoms(), params.groups(), data).unwrap();
            let g = full_gradient(&dual, &params, &pool).unwrap();
            let alpha = rng.random_range(1e-3..10.0);
            let gm = gradient_mapping(&dual, &g, alpha).unwrap();
            assert!(clipped_gradient_norm(&g) <= gm.norm() + 1e-12);
        }
    }

    #[test]
    fn variance_bounded_by_sigma_squared_for_exact_posteriors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let beta = rng.random_range(0.5..20.0);
            let (params, pool) = instance(&mut rng, 2, 3, 12, beta);
            let dual = random_dual(&mut rng, &params, 3.0);
            let full = full_gradient(&dual, &params, &pool).unwrap();
            let var: f64 = pool
                .rows()
                .map(|row| stochastic_gradient(&dual, &params, row).unwrap().distance(&full).powi(2))
                .sum::<f64>()
                / pool.len() as f64;
            assert!(var <= sigma_squared(&params.p).unwrap() + 1e-9);
        }
    }

    #[test]
    fn gradient_lipschitz_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (params, pool) = instance(&mut rng, 2, 2, 9, 7.0);
        let m = smoothness_constant(params.beta, pool.mean_t_norm_sq());
        for _ in 0..100 {
            let a = random_dual(&mut rng, &params, 2.0);
            let b = random_dual(&mut rng, &params, 2.0);
            let ga = full_gradient(&a, &params, &pool).unwrap();
            let gb = full_gradient(&b, &params, &pool).unwrap();
            assert!(ga.distance(&gb) <= m * a.pair().distance(b.pair()) * (1.0 + 1e-6));
        }
    }

    #[test]
    fn dimension_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (params, pool) = instance(&mut rng, 2, 2, 3, 1.0);
        let wrong = DualVars::zeros(params.atoms() + 1, 2);
        assert!(matches!(objective_value(&wrong, &params, &pool), Err(Error::DimensionMismatch { .. })));
        assert!(DualVars::from_flat(1, 1, vec![1.0, -0.1]).is_err());
        assert!(ProblemParams::new(1.0, vec![0.1, 1.5], simplex(&[0.5, 0.5]), params.grid.clone()).is_err());
    }

    #[test]
    fn oracle_samples_are_pool_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (params, pool) = instance(&mut rng, 2, 2, 4, 3.0);
        let dual = random_dual(&mut rng, &params, 1.0);
        let rows: Vec<DualPair> = pool.rows().map(|r| stochastic_gradient(&dual, &params, r).unwrap()).collect();
        let mut oracle = DualOracle::new(&params, &pool, 3).unwrap();
        let mut out = vec![0.0; params.dual_dim()];
        for _ in 0..50 {
            oracle.sample_gradient(dual.as_slice(), &mut out);
            assert!(rows.iter().any(|g| g.as_slice() == out.as_slice()));
        }
        assert!(oracle.full_gradient(dual.as_slice(), &mut out));
        assert_eq!(out, full_gradient(&dual, &params, &pool).unwrap().into_vec());
    }
}
