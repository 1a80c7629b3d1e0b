//! Risk and unfairness measurements for randomized and deterministic
//! predictors, KKT residuals of the dual problem, and metric-history records.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dual::{full_gradient, DualVars, FeaturePool, ProblemParams};
use crate::error::{check_len, invalid, Error, Result};
use crate::math::{policy_probs, CompensatedSum, SimplexVector, SIMPLEX_TOL};

/// Per-row distributions over a common set of atoms (`n x m`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTable {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl PredictionTable {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        let m = atoms.len();
        if m == 0 || probs.len() % m != 0 {
            return Err(invalid("prediction table needs a whole number of rows over a nonempty atom set"));
        }
        for (i, row) in probs.chunks(m).enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(invalid(format!("row {i} is not a probability vector")));
            }
        }
        Ok(Self { atoms, probs })
    }

    pub fn from_rows(atoms: Vec<f64>, rows: &[SimplexVector]) -> Result<Self> {
        let mut probs = Vec::with_capacity(rows.len() * atoms.len());
        for r in rows {
            check_len("prediction row", atoms.len(), r.len())?;
            probs.extend_from_slice(r.as_slice());
        }
        Ok(Self { atoms, probs })
    }

    /// Every row equal to `dist`.
    pub fn constant(atoms: Vec<f64>, dist: &SimplexVector, n: usize) -> Result<Self> {
        check_len("constant distribution", atoms.len(), dist.len())?;
        let probs = (0..n).flat_map(|_| dist.as_slice().iter().copied()).collect();
        Ok(Self { atoms, probs })
    }

    /// Row `i` puts all mass on atom `index[i]`.
    pub fn point_masses(atoms: Vec<f64>, index: &[usize]) -> Result<Self> {
        let m = atoms.len();
        let mut probs = vec![0.0; index.len() * m];
        for (i, &j) in index.iter().enumerate() {
            if j >= m {
                return Err(invalid(format!("atom index {j} out of range")));
            }
            probs[i * m + j] = 1.0;
        }
        Ok(Self { atoms, probs })
    }

    /// Policy distributions at every pool row.
    pub fn from_pool(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool) -> Result<Self> {
        let mut probs = Vec::with_capacity(pool.len() * params.atoms());
        for row in pool.rows() {
            probs.extend_from_slice(policy_probs(dual, row.t, row.r, params.beta)?.as_slice());
        }
        Ok(Self {
            atoms: params.grid.atoms().to_vec(),
            probs,
        })
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn n_rows(&self) -> usize {
        self.probs.len() / self.atoms.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.atoms.len();
        &self.probs[i * m..(i + 1) * m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.probs.chunks(self.atoms.len())
    }

    fn mean_over(&self, rows: impl Iterator<Item = usize>) -> Option<Vec<f64>> {
        let m = self.atoms.len();
        let mut acc = vec![CompensatedSum::default(); m];
        let mut n = 0usize;
        for i in rows {
            for (a, p) in acc.iter_mut().zip(self.row(i)) {
                a.add(*p);
            }
            n += 1;
        }
        (n > 0).then(|| acc.iter().map(|a| a.value() / n as f64).collect())
    }
}

fn check_groups(groups: &[usize], k: usize, n: usize) -> Result<Vec<Vec<usize>>> {
    check_len("sensitive labels", n, groups.len())?;
    let mut members = vec![Vec::new(); k];
    for (i, &s) in groups.iter().enumerate() {
        if s >= k {
            return Err(Error::OutOfRange {
                value: s as f64,
                bound: k as f64 - 1.0,
            });
        }
        members[s].push(i);
    }
    if let Some(s) = members.iter().position(Vec::is_empty) {
        return Err(Error::DegenerateGroup(format!("group {s} has no evaluation rows")));
    }
    Ok(members)
}

/// `(1/n) sum_i sum_l (atom_l - y_i)^2 pi(l | x_i)`, computed exactly.
pub fn empirical_risk(table: &PredictionTable, targets: &[f64]) -> Result<f64> {
    check_len("targets", table.n_rows(), targets.len())?;
    if targets.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut acc = CompensatedSum::default();
    for (row, y) in table.rows().zip(targets) {
        acc.add(row.iter().zip(&table.atoms).map(|(p, a)| p * (a - y).powi(2)).sum());
    }
    Ok(acc.value() / targets.len() as f64)
}

/// Mean squared error of point predictions.
pub fn deterministic_risk(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    check_len("targets", predictions.len(), targets.len())?;
    crate::math::compensated_mean(predictions.iter().zip(targets).map(|(p, y)| (p - y).powi(2)))
        .ok_or_else(|| Error::Empty("evaluation set".into()))
}

/// Risk against the regression function under the pool measure:
/// `mean_x sum_l pi(l|x) r_l(x)`.
pub fn pool_risk(table: &PredictionTable, pool: &FeaturePool) -> Result<f64> {
    check_len("pool rows", pool.len(), table.n_rows())?;
    check_len("pool atoms", pool.atoms(), table.atoms.len())?;
    crate::math::compensated_mean(
        table
            .rows()
            .zip(pool.rows())
            .map(|(p, row)| p.iter().zip(row.r).map(|(a, b)| a * b).sum::<f64>()),
    )
    .ok_or_else(|| Error::Empty("pool".into()))
}

/// Per-group Kolmogorov-Smirnov distance between the group's prediction CDF
/// and the overall one. The CDFs step only at atoms, so the supremum is
/// taken over atoms. CDFs are averaged as offsets from the first row's, so
/// identical rows give exactly zero.
pub fn ks_unfairness(table: &PredictionTable, groups: &[usize], k: usize) -> Result<Vec<f64>> {
    let members = check_groups(groups, k, table.n_rows())?;
    let m = table.atoms.len();
    let mut reference = table.row(0).to_vec();
    for l in 1..m {
        reference[l] += reference[l - 1];
    }
    let mut by_group = vec![vec![CompensatedSum::default(); m]; k];
    let mut overall = vec![CompensatedSum::default(); m];
    for (row, &s) in table.rows().zip(groups) {
        let mut c = 0.0;
        for l in 0..m {
            c += row[l];
            let d = c - reference[l];
            by_group[s][l].add(d);
            overall[l].add(d);
        }
    }
    let n = table.n_rows() as f64;
    Ok(by_group
        .iter()
        .zip(&members)
        .map(|(acc, idx)| {
            let ns = idx.len() as f64;
            acc.iter()
                .zip(&overall)
                .map(|(g, o)| (g.value() / ns - o.value() / n).abs())
                .fold(0.0, f64::max)
                .min(1.0)
        })
        .collect())
}

/// Kolmogorov-Smirnov unfairness of real-valued point predictions.
pub fn ks_unfairness_deterministic(predictions: &[f64], groups: &[usize], k: usize) -> Result<Vec<f64>> {
    let members = check_groups(groups, k, predictions.len())?;
    if predictions.iter().any(|p| !p.is_finite()) {
        return Err(invalid("predictions must be finite"));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| predictions[a].total_cmp(&predictions[b]));
    let n = predictions.len() as f64;
    let sizes: Vec<f64> = members.iter().map(|m| m.len() as f64).collect();
    let mut count = vec![0usize; k];
    let mut total = 0usize;
    let mut sup = vec![0.0f64; k];
    let mut i = 0;
    while i < order.len() {
        let v = predictions[order[i]];
        while i < order.len() && predictions[order[i]] == v {
            count[groups[order[i]]] += 1;
            total += 1;
            i += 1;
        }
        let f = total as f64 / n;
        for s in 0..k {
            sup[s] = sup[s].max((count[s] as f64 / sizes[s] - f).abs());
        }
    }
    Ok(sup)
}

/// Per-atom, per-group gap `|mean over group of pi_l - overall mean of pi_l|`,
/// as an `atoms x K` row-major matrix.
pub fn discretized_unfairness(table: &PredictionTable, groups: &[usize], k: usize) -> Result<Vec<f64>> {
    let members = check_groups(groups, k, table.n_rows())?;
    let overall = table.mean_over(0..table.n_rows()).expect("rows");
    let m = table.atoms.len();
    let mut out = vec![0.0; m * k];
    for (s, idx) in members.iter().enumerate() {
        let g = table.mean_over(idx.iter().copied()).expect("checked");
        for l in 0..m {
            out[l * k + s] = (g[l] - overall[l]).abs();
        }
    }
    Ok(out)
}

/// `U_{ls} = |mean_x pi(l|x) t_s(x)|` under the pool measure.
pub fn pool_unfairness(table: &PredictionTable, pool: &FeaturePool) -> Result<Vec<f64>> {
    check_len("pool rows", pool.len(), table.n_rows())?;
    check_len("pool atoms", pool.atoms(), table.atoms.len())?;
    let (m, k) = (pool.atoms(), pool.groups());
    let mut acc = vec![CompensatedSum::default(); m * k];
    for (p, row) in table.rows().zip(pool.rows()) {
        for l in 0..m {
            for s in 0..k {
                acc[l * k + s].add(p[l] * row.t[s]);
            }
        }
    }
    let n = pool.len() as f64;
    Ok(acc.iter().map(|a| (a.value() / n).abs()).collect())
}

/// `sqrt(sum_{l,s} (U_{ls} - eps_s)_+^2)` for an `atoms x K` matrix `u`.
pub fn clipped_unfairness_norm(u: &[f64], eps: &[f64]) -> Result<f64> {
    let k = eps.len();
    if k == 0 || u.len() % k != 0 {
        return Err(invalid("unfairness matrix does not match the slack vector"));
    }
    Ok(u.iter()
        .enumerate()
        .map(|(i, v)| (v - eps[i % k]).max(0.0).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Components of the KKT residual of `min_{w >= 0} F(w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResidual {
    /// `||min(w, grad F)||`, zero iff `0 <= w` and `grad F >= 0` are complementary.
    pub stationarity: f64,
    /// `||(-grad F)_+||`: fairness-constraint violation of the induced policy.
    pub feasibility: f64,
    /// `sum |w * grad F|`.
    pub slackness: f64,
}

impl KktResidual {
    pub fn total(&self) -> f64 {
        self.stationarity + self.feasibility + self.slackness
    }
}

pub fn kkt_residual(dual: &DualVars, params: &ProblemParams, pool: &FeaturePool) -> Result<KktResidual> {
    let grad = full_gradient(dual, params, pool)?;
    let mut stat = 0.0;
    let mut feas = 0.0;
    let mut slack = 0.0;
    for (w, g) in dual.as_slice().iter().zip(grad.as_slice()) {
        stat += w.min(*g).powi(2);
        feas += (-g).max(0.0).powi(2);
        slack += (w * g).abs();
    }
    Ok(KktResidual {
        stationarity: stat.sqrt(),
        feasibility: feas.sqrt(),
        slackness: slack,
    })
}

/// Whether `R(star) <= R(feasible) + log(2L+1)/beta` (tolerance `1e-6`) under
/// the pool measure. The comparator must satisfy the relaxed constraints.
pub fn risk_gain_check(
    star: &PredictionTable,
    feasible: &PredictionTable,
    params: &ProblemParams,
    pool: &FeaturePool,
) -> Result<bool> {
    let u = pool_unfairness(feasible, pool)?;
    let k = params.groups();
    if let Some((i, v)) = u.iter().enumerate().find(|(i, v)| **v > params.eps[i % k] + 1e-9) {
        return Err(Error::Precondition(format!(
            "comparator violates the fairness constraint at atom {}, group {}: {v} > {}",
            i / k,
            i % k,
            params.eps[i % k]
        )));
    }
    let slack = (params.atoms() as f64).ln() / params.beta;
    Ok(pool_risk(star, pool)? <= pool_risk(feasible, pool)? + slack + 1e-6)
}

/// One recorded point of an optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub step: usize,
    pub oracle_calls: usize,
    pub risk: f64,
    pub ks_unfairness: Vec<f64>,
    pub clipped_unfairness_norm: f64,
    pub gradient_map_norm: f64,
}

impl MetricsReport {
    pub fn ks_max(&self) -> f64 {
        self.ks_unfairness.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Serialize)]
struct HistoryRow {
    step: usize,
    oracle_calls: usize,
    risk: f64,
    ks_max: f64,
    clipped_unfairness_norm: f64,
    grad_map_norm: f64,
}

/// Writes one CSV row per report: step, oracle_calls, risk, ks_max,
/// clipped_unfairness_norm, grad_map_norm.
pub fn write_history_csv<W: Write>(writer: W, history: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in history {
        w.serialize(HistoryRow {
            step: r.step,
            oracle_calls: r.oracle_calls,
            risk: r.risk,
            ks_max: r.ks_max(),
            clipped_unfairness_norm: r.clipped_unfairness_norm,
            grad_map_norm: r.gradient_map_norm,
        })?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Reads back a history written by [`write_history_csv`]. Per-group KS
/// values are not stored; `ks_unfairness` holds the single maximum.
pub fn read_history_csv<R: std::io::Read>(reader: R) -> Result<Vec<MetricsReport>> {
    #[derive(Deserialize)]
    struct Row {
        step: usize,
        oracle_calls: usize,
        risk: f64,
        ks_max: f64,
        clipped_unfairness_norm: f64,
        grad_map_norm: f64,
    }
    let mut out = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let r: Row = row?;
        out.push(MetricsReport {
            step: r.step,
            oracle_calls: r.oracle_calls,
            risk: r.risk,
            ks_unfairness: vec![r.ks_max],
            clipped_unfairness_norm: r.clipped_unfairness_norm,
            gradient_map_norm: r.grad_map_norm,
        });
    }
    Ok(out)
}
