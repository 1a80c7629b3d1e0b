//! Datasets: CSV ingestion and export, the train/unlabeled/test split, the
//! synthetic four-group generator, run configuration, and atomic file output.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::base_models::FeatureMatrix;
use crate::error::{check_len, invalid, Error, Result};
use crate::optim::Method;

/// Features with optional sensitive labels (`0..K`) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub features: FeatureMatrix,
    pub sensitive_name: Option<String>,
    pub sensitive: Option<Vec<usize>>,
    /// Original value of each group index, in index order.
    pub group_labels: Vec<String>,
    pub target_name: Option<String>,
    pub targets: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of groups `K`.
    pub fn groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn sensitive(&self) -> Result<&[usize]> {
        self.sensitive
            .as_deref()
            .ok_or_else(|| Error::MissingColumn("sensitive attribute".into()))
    }

    pub fn targets(&self) -> Result<&[f64]> {
        self.targets
            .as_deref()
            .ok_or_else(|| Error::MissingColumn("target".into()))
    }

    /// Rows at `idx`, in order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            feature_names: self.feature_names.clone(),
            features: self.features.select(idx),
            sensitive_name: self.sensitive_name.clone(),
            sensitive: self.sensitive.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
            group_labels: self.group_labels.clone(),
            target_name: self.target_name.clone(),
            targets: self.targets.as_ref().map(|t| idx.iter().map(|&i| t[i]).collect()),
        }
    }

    /// Copy without sensitive labels and targets.
    pub fn unlabeled(&self) -> Dataset {
        Dataset {
            sensitive_name: None,
            sensitive: None,
            target_name: None,
            targets: None,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        check_len("feature names", self.features.n_cols(), self.feature_names.len())?;
        if let Some(s) = &self.sensitive {
            check_len("sensitive labels", self.len(), s.len())?;
            if let Some(v) = s.iter().find(|v| **v >= self.groups()) {
                return Err(Error::OutOfRange {
                    value: *v as f64,
                    bound: self.groups() as f64 - 1.0,
                });
            }
        }
        if let Some(t) = &self.targets {
            check_len("targets", self.len(), t.len())?;
            if t.iter().any(|v| !v.is_finite()) {
                return Err(invalid("targets must be finite"));
            }
        }
        Ok(())
    }
}

/// Column roles for [`load_csv`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Feature columns; empty means every column not named below.
    #[serde(default)]
    pub features: Vec<String>,
    pub sensitive: Option<String>,
    pub target: Option<String>,
}

/// Sorted distinct labels: numerically if every label parses as a number,
/// lexicographically otherwise.
fn sorted_labels(raw: &[String]) -> Vec<String> {
    let distinct: BTreeSet<&String> = raw.iter().collect();
    let mut labels: Vec<String> = distinct.into_iter().cloned().collect();
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.trim().parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(labels).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        labels = pairs.into_iter().map(|(_, l)| l).collect();
    }
    labels
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = File::open(path).map_err(io_err(path))?;
    read_csv(BufReader::new(file), schema)
}

/// Parses a headed, comma-delimited table. Row numbers in errors count data
/// rows from 1.
pub fn read_csv<R: std::io::Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Empty("CSV header".into()));
    }
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let sens_col = schema.sensitive.as_deref().map(find).transpose()?;
    let target_col = schema.target.as_deref().map(find).transpose()?;
    let feature_cols: Vec<usize> = if schema.features.is_empty() {
        (0..headers.len())
            .filter(|c| Some(*c) != sens_col && Some(*c) != target_col)
            .collect()
    } else {
        schema.features.iter().map(|f| find(f)).collect::<Result<_>>()?
    };

    let parse = |row: usize, col: usize, cell: &str| -> Result<f64> {
        let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
            row,
            column: headers[col].clone(),
            message: format!("{cell:?} is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                row,
                column: headers[col].clone(),
                message: format!("{cell:?} is not finite"),
            });
        }
        Ok(v)
    };

    let mut data = Vec::new();
    let mut raw_sens = Vec::new();
    let mut targets = Vec::new();
    let mut n = 0usize;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        for &c in &feature_cols {
            data.push(parse(row, c, rec.get(c).unwrap_or(""))?);
        }
        if let Some(c) = sens_col {
            let cell = rec.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].clone(),
                    message: "empty sensitive value".into(),
                });
            }
            raw_sens.push(cell.to_string());
        }
        if let Some(c) = target_col {
            targets.push(parse(row, c, rec.get(c).unwrap_or(""))?);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Empty("CSV data rows".into()));
    }
    let group_labels = sorted_labels(&raw_sens);
    let sensitive = sens_col.map(|_| {
        raw_sens
            .iter()
            .map(|v| group_labels.iter().position(|l| l == v).expect("label collected above"))
            .collect()
    });
    let ds = Dataset {
        feature_names: feature_cols.iter().map(|&c| headers[c].clone()).collect(),
        features: FeatureMatrix::new(n, feature_cols.len(), data)?,
        sensitive_name: sens_col.map(|c| headers[c].clone()),
        sensitive,
        group_labels,
        target_name: target_col.map(|c| headers[c].clone()),
        targets: target_col.map(|_| targets),
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes features, then the sensitive column (original labels), then the
/// target. Floats use the shortest representation that round-trips.
pub fn write_csv<W: Write>(writer: W, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = ds.feature_names.clone();
    if ds.sensitive.is_some() {
        header.push(ds.sensitive_name.clone().unwrap_or_else(|| "s".into()));
    }
    if ds.targets.is_some() {
        header.push(ds.target_name.clone().unwrap_or_else(|| "y".into()));
    }
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(s) = &ds.sensitive {
            rec.push(ds.group_labels[s[i]].clone());
        }
        if let Some(t) = &ds.targets {
            rec.push(t[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

/// Train / unlabeled / test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    /// Features only.
    pub unlabeled: Dataset,
    pub test: Dataset,
    pub indices: [Vec<usize>; 3],
}

const SPLIT_RETRIES: usize = 100;

fn check_fractions(fractions: [f64; 3]) -> Result<()> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split fractions must be positive and sum to 1, got {fractions:?}")));
    }
    Ok(())
}

/// Sizes `floor(f_0 n)`, `floor(f_1 n)` and the remainder.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    check_fractions(fractions)?;
    let a = (fractions[0] * n as f64).floor() as usize;
    let b = (fractions[1] * n as f64).floor() as usize;
    Ok([a, b, n - a - b])
}

/// Seeded random split in which every group appears in every part
/// (reshuffling up to 100 times).
pub fn split(ds: &Dataset, fractions: [f64; 3], seed: u64) -> Result<Split> {
    if ds.len() < 3 {
        return Err(invalid(format!("need at least 3 rows to split, got {}", ds.len())));
    }
    let sizes = split_sizes(ds.len(), fractions)?;
    let sens = ds.sensitive()?;
    let k = ds.groups();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    for _ in 0..SPLIT_RETRIES {
        order.shuffle(&mut rng);
        let parts = [
            order[..sizes[0]].to_vec(),
            order[sizes[0]..sizes[0] + sizes[1]].to_vec(),
            order[sizes[0] + sizes[1]..].to_vec(),
        ];
        let complete = parts.iter().all(|p| {
            let mut seen = vec![false; k];
            for &i in p {
                seen[sens[i]] = true;
            }
            seen.iter().all(|s| *s)
        });
        if complete {
            return Ok(Split {
                train: ds.select(&parts[0]),
                unlabeled: ds.select(&parts[1]).unlabeled(),
                test: ds.select(&parts[2]),
                indices: parts,
            });
        }
    }
    Err(Error::DegenerateGroup(format!(
        "some group is missing from a split part after {SPLIT_RETRIES} reshuffles"
    )))
}

/// Group thresholds on the first feature.
pub const SYNTHETIC_CUTS: [f64; 3] = [-0.7, 0.0, 0.7];

/// Group of a synthetic row from its first feature.
pub fn synthetic_group(x1: f64) -> usize {
    if x1 <= SYNTHETIC_CUTS[0] {
        0
    } else if x1 < SYNTHETIC_CUTS[1] {
        1
    } else if x1 < SYNTHETIC_CUTS[2] {
        2
    } else {
        3
    }
}

/// Noise-free synthetic regression function `4 (x1 + x2 + x3) + x1`.
pub fn synthetic_regression(x: &[f64]) -> f64 {
    4.0 * x.iter().sum::<f64>() + x[0]
}

/// `X ~ N(0, I_3)`, `S` from thresholds on `X_1`, `y = 4 sum_j X_j + X_1 + xi`.
pub fn generate_synthetic(n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("synthetic dataset needs n >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(3 * n);
    let mut sens = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let x: [f64; 3] = [
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
            rng.sample(StandardNormal),
        ];
        let xi: f64 = rng.sample(StandardNormal);
        data.extend_from_slice(&x);
        sens.push(synthetic_group(x[0]));
        y.push(synthetic_regression(&x) + xi);
    }
    Ok(Dataset {
        feature_names: vec!["x1".into(), "x2".into(), "x3".into()],
        features: FeatureMatrix::new(n, 3, data)?,
        sensitive_name: Some("s".into()),
        sensitive: Some(sens),
        group_labels: (0..4).map(|s| s.to_string()).collect(),
        target_name: Some("y".into()),
        targets: Some(y),
    })
}

/// Settings of one post-processing run as read from a JSON config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default = "default_schema")]
    pub schema: CsvSchema,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// Optimizer iterations when larger than the theory budget.
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub record_every: Option<usize>,
    #[serde(default)]
    pub bound: Option<f64>,
    #[serde(default)]
    pub calibrate_tau: bool,
    pub out_dir: PathBuf,
}

fn default_schema() -> CsvSchema {
    CsvSchema {
        features: Vec::new(),
        sensitive: Some("s".into()),
        target: Some("y".into()),
    }
}

fn default_fractions() -> [f64; 3] {
    [0.4, 0.4, 0.2]
}

fn default_budget() -> usize {
    10_000
}

fn default_eps() -> Vec<f64> {
    default_eps_grid()
}

fn default_method() -> Method {
    Method::Sgd3AcSa
}

/// `{2^-1, 2^-2, 2^-4, 2^-8, 2^-16}`.
pub fn default_eps_grid() -> Vec<f64> {
    [1, 2, 4, 8, 16].iter().map(|i| 2f64.powi(-i)).collect()
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        check_fractions(self.fractions)?;
        if self.budget < 2 {
            return Err(invalid("budget must be at least 2"));
        }
        if self.eps.is_empty() || self.eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(invalid("eps values must lie in [0, 1]"));
        }
        if self.record_every == Some(0) {
            return Err(invalid("record_every must be positive"));
        }
        if let Some(b) = self.bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(invalid(format!("bound must be positive, got {b}")));
            }
        }
        Ok(())
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Pretty JSON, written atomically.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n").map_err(io_err(path))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn save_csv(path: &Path, ds: &Dataset) -> Result<()> {
    write_atomic(path, |w| write_csv(w, ds))
}
