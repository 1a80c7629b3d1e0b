use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use dpfair::base_models::{LinearModel, LogisticConfig, MulticlassLogistic};
use dpfair::eval::write_history_csv;
use dpfair::io::{
    default_eps_grid, generate_synthetic, load_csv, read_json, save_csv, split, write_atomic, write_json, CsvSchema,
    Dataset, RunConfig,
};
use dpfair::optim::Method;
use dpfair::pipeline::{
    dp_postprocess, estimate_marginals, evaluate_base, evaluate_policy, fit_base, BaseConfig, EvalSet,
    PluginPredictors, PolicyDocument, PostprocessConfig,
};

#[derive(Parser)]
#[command(name = "dpfair", version, about = "Demographic-parity post-processing for regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic four-group dataset as CSV.
    Synth {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the regressor and the group classifier on a labeled CSV.
    TrainBase {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        #[command(flatten)]
        base: BaseArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Split a dataset, fit base models and post-process them.
    Postprocess(PostprocessArgs),
    /// Risk and per-group KS unfairness of a saved policy on a labeled CSV.
    Evaluate {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schema: SchemaArgs,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat the pipeline over a list of slacks and seeds; report mean and std.
    Sweep(SweepArgs),
}

#[derive(Args, Clone)]
struct SchemaArgs {
    #[arg(long, default_value = "s")]
    sensitive: String,
    #[arg(long, default_value = "y")]
    target: String,
    /// Comma-separated feature columns (default: all other columns).
    #[arg(long, value_delimiter = ',')]
    features: Vec<String>,
}

impl SchemaArgs {
    fn schema(&self) -> CsvSchema {
        CsvSchema {
            features: self.features.clone(),
            sensitive: Some(self.sensitive.clone()),
            target: Some(self.target.clone()),
        }
    }
}

#[derive(Args, Clone)]
struct BaseArgs {
    /// Prediction bound B (default: max |y| on the training data, at least 1).
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    ridge: f64,
}

impl BaseArgs {
    fn config(&self) -> BaseConfig {
        BaseConfig {
            ridge: self.ridge,
            logistic: LogisticConfig::default(),
            bound: self.bound,
        }
    }
}

#[derive(Args, Clone)]
struct PostprocessArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schema: SchemaArgs,
    #[command(flatten)]
    base: BaseArgs,
    #[arg(long)]
    out_dir: PathBuf,
    /// Oracle budget T (fixes beta and L).
    #[arg(long = "T", default_value_t = 10_000)]
    budget: usize,
    /// Oracle calls to spend (default: T).
    #[arg(long)]
    iterations: Option<usize>,
    /// One slack for all groups, or one per group.
    #[arg(long, value_delimiter = ',', default_value = "0.00390625")]
    eps: Vec<f64>,
    #[arg(long, default_value = "sgd3-ac-sa")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split fractions train,unlabeled,test.
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.4,0.2")]
    fractions: Vec<f64>,
    /// Oracle calls between history rows (default: iterations / 100).
    #[arg(long)]
    record_every: Option<usize>,
    /// Rescale the group posteriors to match the marginals on the unlabeled split.
    #[arg(long)]
    calibrate_tau: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// JSON run configuration; replaces the flags below.
    #[arg(long, conflicts_with = "data")]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "config")]
    data: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long = "T", default_value_t = 10_000)]
    budget: usize,
    #[arg(long)]
    iterations: Option<usize>,
    /// Slack values (default: 2^-1, 2^-2, 2^-4, 2^-8, 2^-16).
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    #[arg(long, default_value = "sgd3-ac-sa")]
    method: Method,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    calibrate_tau: bool,
}

fn fractions(v: &[f64]) -> Result<[f64; 3]> {
    match v {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => bail!("--fractions needs three values, got {}", v.len()),
    }
}

fn load(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    load_csv(path, schema).with_context(|| format!("loading {}", path.display()))
}

fn save_models(dir: &Path, base: &PluginPredictors) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("regressor.json"), &base.regressor)?;
    write_json(&dir.join("classifier.json"), &base.classifier)?;
    Ok(())
}

#[derive(Serialize)]
struct GroupMetrics {
    risk: f64,
    ks: Vec<f64>,
    ks_max: f64,
}

impl GroupMetrics {
    fn new((risk, ks): (f64, Vec<f64>)) -> Self {
        let ks_max = ks.iter().copied().fold(0.0, f64::max);
        Self { risk, ks, ks_max }
    }
}

#[derive(Serialize)]
struct RunReport {
    groups: Vec<String>,
    base: GroupMetrics,
    fair: GroupMetrics,
}

/// Everything one post-processing run produces, before writing.
struct RunResult {
    base: PluginPredictors,
    document: PolicyDocument,
    history: Vec<dpfair::eval::MetricsReport>,
    report: RunReport,
    parts: dpfair::io::Split,
}

fn run_pipeline(ds: &Dataset, args: &PostprocessArgs) -> Result<RunResult> {
    let parts = split(ds, fractions(&args.fractions)?, args.seed)?;
    let mut base = fit_base(&parts.train, &args.base.config())?;
    let k = ds.groups();
    let p = estimate_marginals(parts.train.sensitive()?, k)?;
    if args.calibrate_tau {
        base.calibrate(&parts.unlabeled.features, &p)?;
    }
    let iterations = args.iterations.unwrap_or(args.budget);
    let config = PostprocessConfig {
        budget: args.budget,
        iterations: args.iterations,
        half: None,
        beta: None,
        eps: args.eps.clone(),
        method: args.method,
        seed: args.seed,
        record_every: Some(args.record_every.unwrap_or((iterations / 100).max(1))),
        bound: None,
    };
    let eval = EvalSet::from_dataset(&parts.test)?;
    let out = dp_postprocess(&config, p, base.clone(), &parts.unlabeled.features, Some(eval))?;
    let report = RunReport {
        groups: ds.group_labels.clone(),
        base: GroupMetrics::new(evaluate_base(&base, eval)?),
        fair: GroupMetrics::new(evaluate_policy(&out.policy, eval)?),
    };
    let params = &out.policy.params;
    let document = PolicyDocument {
        grid: params.grid.clone(),
        beta: params.beta,
        eps: params.eps.clone(),
        p: params.p.clone(),
        dual: out.policy.dual.clone(),
        regressor: "regressor.json".into(),
        classifier: "classifier.json".into(),
        calibration: base.calibration.clone(),
        feature_names: ds.feature_names.clone(),
        group_labels: ds.group_labels.clone(),
        summary: Some(out.summary),
    };
    Ok(RunResult {
        base,
        document,
        history: out.history,
        report,
        parts,
    })
}

fn postprocess(args: &PostprocessArgs) -> Result<()> {
    let ds = load(&args.data, &args.schema.schema())?;
    let res = run_pipeline(&ds, args)?;
    let dir = &args.out_dir;
    save_models(dir, &res.base)?;
    write_json(&dir.join("policy.json"), &res.document)?;
    write_atomic(&dir.join("history.csv"), |w| write_history_csv(w, &res.history))?;
    write_json(&dir.join("report.json"), &res.report)?;
    save_csv(&dir.join("train.csv"), &res.parts.train)?;
    save_csv(&dir.join("unlabeled.csv"), &res.parts.unlabeled)?;
    save_csv(&dir.join("test.csv"), &res.parts.test)?;
    print_report(&res.report);
    println!("wrote {}", dir.join("policy.json").display());
    Ok(())
}

fn print_report(r: &RunReport) {
    println!("{:<8} {:>10} {:>10}", "", "base", "fair");
    println!("{:<8} {:>10.4} {:>10.4}", "risk", r.base.risk, r.fair.risk);
    for (s, label) in r.groups.iter().enumerate() {
        println!("{:<8} {:>10.4} {:>10.4}", format!("ks[{label}]"), r.base.ks[s], r.fair.ks[s]);
    }
}

/// Maps the dataset's group indices onto the label order stored in the policy.
fn align_groups(ds: &mut Dataset, labels: &[String]) -> Result<()> {
    if labels.is_empty() || ds.group_labels == labels {
        return Ok(());
    }
    let map: Vec<usize> = ds
        .group_labels
        .iter()
        .map(|l| {
            labels
                .iter()
                .position(|m| m == l)
                .with_context(|| format!("group {l:?} is not known to the policy"))
        })
        .collect::<Result<_>>()?;
    if let Some(s) = ds.sensitive.as_mut() {
        for v in s.iter_mut() {
            *v = map[*v];
        }
    }
    ds.group_labels = labels.to_vec();
    Ok(())
}

fn evaluate(policy_path: &Path, data: &Path, schema: &SchemaArgs, out: Option<&Path>) -> Result<()> {
    let doc: PolicyDocument = read_json(policy_path).with_context(|| format!("reading {}", policy_path.display()))?;
    let root = policy_path.parent().unwrap_or(Path::new("."));
    let regressor: LinearModel = read_json(&root.join(&doc.regressor))?;
    let classifier: MulticlassLogistic = read_json(&root.join(&doc.classifier))?;
    let labels = doc.group_labels.clone();
    let policy = doc.into_policy(regressor, classifier)?;
    let mut ds = load(data, &schema.schema())?;
    align_groups(&mut ds, &labels)?;
    let eval = EvalSet::from_dataset(&ds)?;
    let report = RunReport {
        groups: if labels.is_empty() { ds.group_labels.clone() } else { labels },
        base: GroupMetrics::new(evaluate_base(&policy.predictors, eval)?),
        fair: GroupMetrics::new(evaluate_policy(&policy, eval)?),
    };
    print_report(&report);
    if let Some(path) = out {
        write_json(path, &report)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    eps: f64,
    reps: usize,
    risk_mean: f64,
    risk_std: f64,
    ks_mean: f64,
    ks_std: f64,
    base_risk_mean: f64,
    base_ks_mean: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seed of repetition `rep`, shared by every slack value.
fn derive_seed(seed: u64, rep: usize) -> u64 {
    seed ^ (rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => read_json::<RunConfig>(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig {
            data: args.data.clone().expect("clap requires --data without --config"),
            schema: args.schema.schema(),
            fractions: [0.4, 0.4, 0.2],
            seed: args.seed,
            budget: args.budget,
            iterations: args.iterations,
            eps: if args.eps.is_empty() { default_eps_grid() } else { args.eps.clone() },
            method: args.method,
            record_every: None,
            bound: args.bound,
            calibrate_tau: args.calibrate_tau,
            out_dir: args.out_dir.clone().unwrap_or_else(|| PathBuf::from(".")),
        },
    };
    cfg.validate()?;
    if args.reps == 0 {
        bail!("--reps must be at least 1");
    }
    let ds = load(&cfg.data, &cfg.schema)?;
    let jobs: Vec<(usize, usize)> = (0..cfg.eps.len()).flat_map(|e| (0..args.reps).map(move |r| (e, r))).collect();
    let results: Vec<RunReport> = jobs
        .par_iter()
        .map(|&(e, r)| {
            let run = PostprocessArgs {
                data: cfg.data.clone(),
                schema: args.schema.clone(),
                base: BaseArgs { bound: cfg.bound, ridge: 0.0 },
                out_dir: cfg.out_dir.clone(),
                budget: cfg.budget,
                iterations: cfg.iterations,
                eps: vec![cfg.eps[e]],
                method: cfg.method,
                seed: derive_seed(cfg.seed, r),
                fractions: cfg.fractions.to_vec(),
                record_every: Some(usize::MAX),
                calibrate_tau: cfg.calibrate_tau,
            };
            run_pipeline(&ds, &run)
                .map(|res| res.report)
                .with_context(|| format!("eps = {}, repetition {r}", cfg.eps[e]))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SweepRow> = cfg
        .eps
        .iter()
        .enumerate()
        .map(|(e, &eps)| {
            let chunk = &results[e * args.reps..(e + 1) * args.reps];
            let col = |f: &dyn Fn(&RunReport) -> f64| chunk.iter().map(f).collect::<Vec<_>>();
            let (risk_mean, risk_std) = mean_std(&col(&|r| r.fair.risk));
            let (ks_mean, ks_std) = mean_std(&col(&|r| r.fair.ks_max));
            SweepRow {
                eps,
                reps: args.reps,
                risk_mean,
                risk_std,
                ks_mean,
                ks_std,
                base_risk_mean: mean_std(&col(&|r| r.base.risk)).0,
                base_ks_mean: mean_std(&col(&|r| r.base.ks_max)).0,
            }
        })
        .collect();
    println!("{:>12} {:>20} {:>20} {:>10} {:>10}", "eps", "risk", "ks_max", "base_risk", "base_ks");
    for r in &rows {
        println!(
            "{:>12.6e} {:>9.4} ± {:<8.4} {:>9.4} ± {:<8.4} {:>10.4} {:>10.4}",
            r.eps, r.risk_mean, r.risk_std, r.ks_mean, r.ks_std, r.base_risk_mean, r.base_ks_mean
        );
    }
    std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let path = cfg.out_dir.join("sweep.csv");
    write_atomic(&path, |w| {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r).map_err(dpfair::Error::Csv)?;
        }
        csv.flush().map_err(|e| dpfair::Error::Csv(e.into()))
    })?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { n, seed, out } => {
            let ds = generate_synthetic(n, seed)?;
            save_csv(&out, &ds)?;
            println!("wrote {n} rows to {}", out.display());
        }
        Command::TrainBase {
            data,
            schema,
            base,
            out_dir,
        } => {
            let ds = load(&data, &schema.schema())?;
            let fitted = fit_base(&ds, &base.config())?;
            save_models(&out_dir, &fitted)?;
            println!("bound {}; wrote models to {}", fitted.regressor.clamp_bound, out_dir.display());
        }
        Command::Postprocess(args) => postprocess(&args)?,
        Command::Evaluate {
            policy,
            data,
            schema,
            out,
        } => evaluate(&policy, &data, &schema, out.as_deref())?,
        Command::Sweep(args) => sweep(&args)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
