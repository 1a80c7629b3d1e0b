//! Prediction grid and the elementary functions the dual objective is built
//! from: log-sum-exp, softmax, negative entropy, the group-likelihood ratio
//! vector `t(x)` and the per-atom squared-loss vector `r(x)`.

use serde::{Deserialize, Serialize};

use crate::dual::DualVars;
use crate::error::{check_len, invalid, Error, Result};

/// Absolute tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Uniform grid `{ l * B / L : l = -L..=L }` on `[-B, B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct Grid {
    bound: f64,
    half: usize,
    atoms: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct GridSpec {
    bound: f64,
    half: usize,
}

impl TryFrom<GridSpec> for Grid {
    type Error = Error;
    fn try_from(spec: GridSpec) -> Result<Self> {
        Grid::new(spec.bound, spec.half)
    }
}

impl From<Grid> for GridSpec {
    fn from(g: Grid) -> Self {
        GridSpec {
            bound: g.bound,
            half: g.half,
        }
    }
}

impl Grid {
    pub fn new(bound: f64, half: usize) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(invalid(format!("grid bound must be positive, got {bound}")));
        }
        if half < 1 {
            return Err(invalid("grid half-count L must be at least 1"));
        }
        let l = half as f64;
        // Built from the integer offset so that symmetry is exact.
        let atoms = (0..=2 * half)
            .map(|i| {
                let offset = i as i64 - half as i64;
                offset as f64 * bound / l
            })
            .collect();
        Ok(Self { bound, half, atoms })
    }

    /// Signal bound `B`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    /// Half grid count `L`.
    pub fn half(&self) -> usize {
        self.half
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn spacing(&self) -> f64 {
        self.bound / self.half as f64
    }

    /// Index of the atom closest to `value` (lower index on ties).
    pub fn nearest_index(&self, value: f64) -> usize {
        let pos = (value / self.spacing()).round() + self.half as f64;
        pos.clamp(0.0, (2 * self.half) as f64) as usize
    }
}

/// A probability vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(invalid("probability vector must be nonempty"));
        }
        if let Some(bad) = entries.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(invalid(format!("probability entry {bad} is not a finite nonnegative number")));
        }
        let total: f64 = entries.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(invalid("probability vector must be nonempty"));
        }
        Ok(Self(vec![1.0 / m as f64; m]))
    }

    /// Skips validation; callers guarantee the simplex invariant.
    pub(crate) fn from_raw(entries: Vec<f64>) -> Self {
        Self(entries)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry (first one on ties).
    pub fn mode(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.0.iter().enumerate() {
            if *v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for SimplexVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        SimplexVector::new(v)
    }
}

impl From<SimplexVector> for Vec<f64> {
    fn from(v: SimplexVector) -> Self {
        v.0
    }
}

impl std::ops::Index<usize> for SimplexVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Compensated mean of an iterator; `None` when empty.
pub fn compensated_mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut acc = CompensatedSum::default();
    let mut n = 0usize;
    for v in values {
        acc.add(v);
        n += 1;
    }
    (n > 0).then(|| acc.value() / n as f64)
}

/// `beta^-1 * log(sum_j exp(beta * w_j))`, evaluated in max-shifted form.
pub fn lse(w: &[f64], beta: f64) -> Result<f64> {
    if w.is_empty() {
        return Err(invalid("log-sum-exp of an empty vector"));
    }
    if !(beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    Ok(lse_unchecked(w, beta))
}

pub(crate) fn lse_unchecked(w: &[f64], beta: f64) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = w.iter().map(|&v| (beta * (v - max)).exp()).sum();
    max + s.ln() / beta
}

/// Softmax of `w`. Scale by `beta` before calling.
pub fn softmax(w: &[f64]) -> Result<SimplexVector> {
    if w.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    let mut out = w.to_vec();
    softmax_in_place(&mut out);
    Ok(SimplexVector(out))
}

pub(crate) fn softmax_in_place(w: &mut [f64]) {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in w.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in w.iter_mut() {
        *v /= total;
    }
}

/// `sum_j mu_j log mu_j`, with `0 log 0 = 0`.
pub fn neg_entropy(mu: &SimplexVector) -> f64 {
    mu.0.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum()
}

/// `t_s = 1 - tau_s / p_s`.
pub fn t_vector(tau: &SimplexVector, p: &SimplexVector) -> Result<Vec<f64>> {
    check_len("t_vector", p.len(), tau.len())?;
    check_marginals(p)?;
    Ok(tau
        .0
        .iter()
        .zip(&p.0)
        .map(|(tau_s, p_s)| 1.0 - tau_s / p_s)
        .collect())
}

pub(crate) fn check_marginals(p: &SimplexVector) -> Result<()> {
    match p.0.iter().position(|&v| v <= 0.0) {
        Some(s) => Err(Error::DegenerateGroup(format!("group {s} has zero marginal probability"))),
        None => Ok(()),
    }
}

/// `r_l = (eta - atom_l)^2` for every atom of the grid.
pub fn r_vector(eta_val: f64, grid: &Grid) -> Vec<f64> {
    grid.atoms.iter().map(|a| (eta_val - a).powi(2)).collect()
}

/// Per-atom scores `beta * (<lambda_l - nu_l, t> - r_l)` written into `out`.
pub(crate) fn policy_scores_into(dual: &[f64], k: usize, t: &[f64], r: &[f64], beta: f64, out: &mut [f64]) {
    let atoms = r.len();
    let (lam, nu) = dual.split_at(atoms * k);
    for (l, score) in out.iter_mut().enumerate() {
        let lam_l = &lam[l * k..(l + 1) * k];
        let nu_l = &nu[l * k..(l + 1) * k];
        let mut dot = 0.0;
        for s in 0..k {
            dot += (lam_l[s] - nu_l[s]) * t[s];
        }
        *score = beta * (dot - r[l]);
    }
}

/// Randomized policy at one input: softmax over `beta (<lambda_l - nu_l, t> - r_l)`.
pub fn policy_probs(dual: &DualVars, t: &[f64], r: &[f64], beta: f64) -> Result<SimplexVector> {
    check_len("policy_probs: t", dual.groups(), t.len())?;
    check_len("policy_probs: r", dual.atoms(), r.len())?;
    if !(beta > 0.0) {
        return Err(invalid(format!("beta must be positive, got {beta}")));
    }
    let mut out = vec![0.0; r.len()];
    policy_scores_into(dual.as_slice(), t.len(), t, r, beta, &mut out);
    softmax_in_place(&mut out);
    Ok(SimplexVector(out))
}
