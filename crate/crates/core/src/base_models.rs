//! Base estimators: a clamped linear regressor for the regression function,
//! a multinomial logistic classifier for the group posterior, and the
//! truncate-to-grid operator for deterministic predictors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Error, Result};
use crate::math::{softmax_in_place, Grid, SimplexVector};

/// Relative eigenvalue floor below which a normal-equation system counts as
/// singular.
const RANK_TOL: f64 = 1e-12;

/// Row-major `n x d` matrix of features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("feature matrix storage", rows * cols, data.len())?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("feature values must be finite, found {v}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("feature row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn n_cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> FeatureMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    fn column_stats(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.max(1) as f64;
        let mut mean = vec![0.0; self.cols];
        for r in self.rows() {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut sd = vec![0.0; self.cols];
        for r in self.rows() {
            for j in 0..self.cols {
                sd[j] += (r[j] - mean[j]).powi(2) / n;
            }
        }
        for s in sd.iter_mut() {
            *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
        }
        (mean, sd)
    }
}

/// Affine regressor `<w, x> + b` with outputs clamped to `[-B, B]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    /// Slopes followed by the intercept.
    pub weights: Vec<f64>,
    pub clamp_bound: f64,
}

impl LinearModel {
    pub fn dim(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn intercept(&self) -> f64 {
        self.weights[self.dim()]
    }

    pub fn predict_raw(&self, x: &[f64]) -> Result<f64> {
        check_len("regressor input", self.dim(), x.len())?;
        Ok(self.weights[..x.len()].iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.intercept())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict_raw(x)?.clamp(-self.clamp_bound, self.clamp_bound))
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("linear model weights must be finite and include an intercept"));
        }
        if !(self.clamp_bound > 0.0 && self.clamp_bound.is_finite()) {
            return Err(invalid(format!("clamp bound must be positive, got {}", self.clamp_bound)));
        }
        Ok(())
    }
}

/// Least squares with an unpenalized intercept:
/// minimizes `||X w + b - y||^2 + ridge ||w||^2`.
pub fn fit_least_squares(features: &FeatureMatrix, targets: &[f64], ridge: f64, clamp_bound: f64) -> Result<LinearModel> {
    check_len("regression targets", features.n_rows(), targets.len())?;
    if features.n_rows() == 0 {
        return Err(Error::Empty("regression training set".into()));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(invalid(format!("ridge must be nonnegative, got {ridge}")));
    }
    if let Some(y) = targets.iter().find(|y| !y.is_finite()) {
        return Err(invalid(format!("targets must be finite, found {y}")));
    }
    let n = features.n_rows();
    let d = features.n_cols();
    let (mean, _) = features.column_stats();
    let y_mean = targets.iter().sum::<f64>() / n as f64;

    let mut xc = DMatrix::<f64>::zeros(n, d);
    for (i, r) in features.rows().enumerate() {
        for j in 0..d {
            xc[(i, j)] = r[j] - mean[j];
        }
    }
    let yc = DVector::from_iterator(n, targets.iter().map(|y| y - y_mean));
    let mut gram = xc.tr_mul(&xc);
    for j in 0..d {
        gram[(j, j)] += ridge;
    }
    let slopes = if d == 0 {
        DVector::zeros(0)
    } else {
        let eig = gram.clone().symmetric_eigenvalues();
        let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        let ratio = if max > 0.0 { min / max } else { 0.0 };
        if ratio <= RANK_TOL {
            return Err(Error::RankDeficient(ratio));
        }
        let rhs = xc.tr_mul(&yc);
        gram.cholesky()
            .ok_or(Error::RankDeficient(ratio))?
            .solve(&rhs)
    };
    let intercept = y_mean - slopes.iter().zip(&mean).map(|(w, m)| w * m).sum::<f64>();
    let mut weights: Vec<f64> = slopes.iter().copied().collect();
    weights.push(intercept);
    let model = LinearModel {
        weights,
        clamp_bound,
    };
    model.validate()?;
    Ok(model)
}

/// Softmax-linear classifier over `K` classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassLogistic {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `K x (d + 1)`, intercept last in each row.
    pub weights: Vec<f64>,
}

impl MulticlassLogistic {
    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let stride = self.dim + 1;
        for (k, o) in out.iter_mut().enumerate() {
            let w = &self.weights[k * stride..(k + 1) * stride];
            *o = w[..self.dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[self.dim];
        }
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<SimplexVector> {
        check_len("classifier input", self.dim, x.len())?;
        let mut p = vec![0.0; self.classes];
        self.logits_into(x, &mut p);
        softmax_in_place(&mut p);
        Ok(SimplexVector::from_raw(p))
    }

    pub fn predict_class(&self, x: &[f64]) -> Result<usize> {
        Ok(self.predict_proba(x)?.mode())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(invalid("classifier needs at least one class"));
        }
        check_len("classifier weights", self.classes * (self.dim + 1), self.weights.len())?;
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(invalid("classifier weights must be finite"));
        }
        Ok(())
    }
}

/// Settings for [`fit_logistic`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    /// Penalty on slopes (not intercepts).
    pub l2: f64,
    pub iters: usize,
    /// Initial step; halved until the loss decreases enough.
    pub lr: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            iters: 500,
            lr: 1.0,
        }
    }
}

/// Fitted classifier and its per-iteration training objective.
#[derive(Debug, Clone)]
pub struct LogisticFit {
    pub model: MulticlassLogistic,
    pub loss_history: Vec<f64>,
}

/// Mean cross-entropy plus `(l2 / 2) ||slopes||^2`, trained by gradient
/// descent with backtracking on standardized features.
pub fn fit_logistic(features: &FeatureMatrix, labels: &[usize], classes: usize, config: &LogisticConfig) -> Result<LogisticFit> {
    check_len("class labels", features.n_rows(), labels.len())?;
    if features.n_rows() == 0 {
        return Err(Error::Empty("classifier training set".into()));
    }
    if classes == 0 {
        return Err(invalid("need at least one class"));
    }
    if !(config.l2 >= 0.0) || !(config.lr > 0.0) {
        return Err(invalid("l2 must be nonnegative and lr positive"));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::OutOfRange {
                value: l as f64,
                bound: (classes - 1) as f64,
            });
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|c| *c == 0) {
        return Err(Error::DegenerateGroup(format!("class {k} has no training rows")));
    }

    let n = features.n_rows();
    let d = features.n_cols();
    let (mean, sd) = features.column_stats();
    let z: Vec<f64> = features
        .rows()
        .flat_map(|r| (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect::<Vec<_>>())
        .collect();
    let std_model = |weights: Vec<f64>| MulticlassLogistic { classes, dim: d, weights };
    let stride = d + 1;

    let objective = |w: &[f64], grad: Option<&mut [f64]>| -> f64 {
        let m = std_model(w.to_vec());
        let mut p = vec![0.0; classes];
        let mut loss = 0.0;
        let mut g_acc = vec![0.0; w.len()];
        for i in 0..n {
            let x = &z[i * d..(i + 1) * d];
            m.logits_into(x, &mut p);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + p.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - p[labels[i]];
            if grad.is_some() {
                for k in 0..classes {
                    let coef = (p[k] - lse).exp() - if k == labels[i] { 1.0 } else { 0.0 };
                    let row = &mut g_acc[k * stride..(k + 1) * stride];
                    for j in 0..d {
                        row[j] += coef * x[j];
                    }
                    row[d] += coef;
                }
            }
        }
        let mut penalty = 0.0;
        for k in 0..classes {
            for j in 0..d {
                penalty += w[k * stride + j].powi(2);
            }
        }
        if let Some(g) = grad {
            for (i, gi) in g.iter_mut().enumerate() {
                *gi = g_acc[i] / n as f64 + if i % stride < d { config.l2 * w[i] } else { 0.0 };
            }
        }
        loss / n as f64 + 0.5 * config.l2 * penalty
    };

    let dimw = classes * stride;
    let mut w = vec![0.0; dimw];
    let mut g = vec![0.0; dimw];
    let mut loss = objective(&w, Some(&mut g));
    let mut history = vec![loss];
    let mut step = config.lr;
    let mut trial = vec![0.0; dimw];
    for _ in 0..config.iters {
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        if gnorm2 < 1e-24 {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..dimw {
                trial[i] = w[i] - step * g[i];
            }
            let trial_loss = objective(&trial, None);
            if trial_loss <= loss - 0.5 * step * gnorm2 {
                std::mem::swap(&mut w, &mut trial);
                loss = objective(&w, Some(&mut g));
                accepted = true;
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        history.push(loss);
    }

    // fold standardization back into raw-feature weights
    let mut raw = vec![0.0; dimw];
    for k in 0..classes {
        let row = &w[k * stride..(k + 1) * stride];
        let mut b = row[d];
        for j in 0..d {
            raw[k * stride + j] = row[j] / sd[j];
            b -= row[j] * mean[j] / sd[j];
        }
        raw[k * stride + d] = b;
    }
    let model = std_model(raw);
    model.validate()?;
    Ok(LogisticFit {
        model,
        loss_history: history,
    })
}

/// Index of `T_L(h)` in the grid: `trunc(L h / B)` shifted by `L`.
pub fn discretize_tl_index(h: f64, grid: &Grid) -> Result<usize> {
    let b = grid.bound();
    if !(h.abs() <= b) {
        return Err(Error::OutOfRange { value: h, bound: b });
    }
    let l = grid.half() as f64;
    let k = (l * h / b).trunc().clamp(-l, l);
    Ok((k + l) as usize)
}

/// `T_L(h) = trunc(L h / B) B / L`, truncating toward zero.
pub fn discretize_tl(h: f64, grid: &Grid) -> Result<f64> {
    Ok(grid.atoms()[discretize_tl_index(h, grid)?])
}
