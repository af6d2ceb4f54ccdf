//! The `survseq` command line: preprocess, train, cv, evaluate and synth.
//!
//! Every successful run writes a `manifest.json` listing its inputs,
//! configuration and outputs with SHA-256 digests. Exit codes: 0 success,
//! 1 usage, 2 input error, 3 compatibility error, 4 numeric failure.

pub mod manifest;
pub mod plot;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use thiserror::Error;

use crate::container::ContainerError;
use crate::dataset::{
    assemble_sequences, default_max_visits, feature_spec_json, fit_schema, load_feature_spec, parse_long_csv,
    write_long_csv, DatasetError, FeatureSpec, SurvivalDataset,
};
use crate::metrics::{evaluate_model, EvalOptions, MetricsError, DEFAULT_QUANTILES};
use crate::par::{with_thread_limit, Execution};
use crate::synth::{generate, import_synthetic, optimism, GeneratorConfig, SynthError};
use crate::timegrid::{kaplan_meier, StepFunction};
use crate::trainer::{
    cross_validate, early_stopping_split, train_with, Augmentation, CvOptions, CvReport, TrainConfig, TrainError,
    TrainedModel,
};
use manifest::{Run, MANIFEST_FILE};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_COMPATIBILITY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const THREADS_ENV: &str = "SURVSEQ_THREADS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Compatibility(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Input(_) => EXIT_INPUT,
            CliError::Compatibility(_) => EXIT_COMPATIBILITY,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::SchemaMismatch(_) | DatasetError::Container(ContainerError::VersionMismatch { .. }) => {
                CliError::Compatibility(e.to_string())
            }
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::SchemaMismatch(_) => CliError::Compatibility(e.to_string()),
            SynthError::Dataset(d) => d.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Incompatible(_) | TrainError::VersionMismatch { .. } => CliError::Compatibility(e.to_string()),
            TrainError::NonFiniteLoss { .. } | TrainError::Encoder(_) => CliError::Numeric(e.to_string()),
            TrainError::Metrics(m) => m.into(),
            TrainError::Dataset(d) => d.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "survseq", version, about = "Survival analysis over multi-visit patient records")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a long-format CSV into a dataset container.
    Preprocess(PreprocessArgs),
    /// Train one model with early stopping.
    Train(TrainArgs),
    /// K-fold cross-validation, optionally with synthetic augmentation.
    Cv(CvArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Generate synthetic patients and report their optimism.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON object mapping feature column to "numerical" or "categorical".
    #[arg(long)]
    pub spec: PathBuf,
    /// Sequence length; defaults to the 95th percentile of visit counts.
    #[arg(long)]
    pub max_visits: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` training configuration; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Accept hyperparameters outside the tuning ranges.
    #[arg(long)]
    pub allow_out_of_range: bool,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    /// `baseline`, a generator config file, or a CSV of synthetic records.
    #[arg(long, conflicts_with = "synthetic_csv")]
    pub augment: Option<String>,
    /// Pre-generated synthetic records in the long CSV layout; same as
    /// `--augment <csv>`.
    #[arg(long)]
    pub synthetic_csv: Option<PathBuf>,
    /// Synthetic fraction for the generator.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_QUANTILES)]
    pub quantiles: Vec<f64>,
    /// Score Brier with inverse-probability-of-censoring weights.
    #[arg(long)]
    pub ipcw_brier: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_QUANTILES)]
    pub quantiles: Vec<f64>,
    #[arg(long)]
    pub ipcw_brier: bool,
    /// Directory for `metrics.csv` and the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Synthetic visit records as a fraction of the input visits.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub jitter_scale: Option<f64>,
    #[arg(long)]
    pub duration_jitter: Option<f64>,
    /// Optimism weight ramp length; defaults to the largest real duration.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Compare the data with itself instead of generating.
    #[arg(long)]
    pub self_test: bool,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn main_with_args(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => Some(n),
            Err(_) => {
                eprintln!("error: {THREADS_ENV}={v:?} is not a thread count");
                return EXIT_USAGE;
            }
        },
        Err(_) => None,
    };
    let rest: Vec<String> = args.iter().skip(1).cloned().collect();
    match with_thread_limit(threads, || run(cli.command, &rest)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command, args: &[String]) -> Result<(), CliError> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(&a, args),
        Command::Train(a) => cmd_train(&a, args),
        Command::Cv(a) => cmd_cv(&a, args),
        Command::Evaluate(a) => cmd_evaluate(&a, args),
        Command::Synth(a) => cmd_synth(&a, args),
    }
}

fn load_dataset(run: &mut Run, path: &Path) -> Result<SurvivalDataset, CliError> {
    run.input(path)?;
    Ok(SurvivalDataset::load(path)?)
}

fn load_config(run: &mut Run, args: &ConfigArgs) -> Result<TrainConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let bytes = run.input(path)?;
            let text = String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{}: not UTF-8", path.display())))?;
            TrainConfig::parse(&text, args.allow_out_of_range)?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    run.set_seed(config.seed);
    run.set_config(config.entries());
    Ok(config)
}

fn check_quantiles(q: &[f64]) -> Result<(), CliError> {
    if q.is_empty() || q.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(CliError::Usage(format!("quantiles must lie in (0, 1), got {q:?}")));
    }
    Ok(())
}

pub fn summary_text(data: &SurvivalDataset) -> String {
    let s = data.summary();
    format!(
        "patients {}, visits {}, max visits {}\n\
         numerical features {}, categorical features {}\n\
         events {:.2}%, censored {:.2}%\n\
         duration min {:.4}, max {:.4}, mean {:.4}\n",
        s.n_patients,
        s.n_visits,
        s.max_visits,
        s.n_num,
        s.n_cat,
        s.event_pct,
        s.censored_pct,
        s.duration_min,
        s.duration_max,
        s.duration_mean
    )
}

fn file_name(path: &Path) -> Result<String, CliError> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| CliError::Usage(format!("{} is not a file path", path.display())))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_preprocess(a: &PreprocessArgs, args: &[String]) -> Result<(), CliError> {
    let name = file_name(&a.out)?;
    let mut run = Run::start("preprocess", args, &parent_dir(&a.out), &format!("{name}.manifest.json"))?;
    run.input(&a.spec)?;
    let spec = load_feature_spec(&a.spec)?;
    run.input(&a.input)?;
    let table = parse_long_csv(&a.input, &spec)?;
    let schema = fit_schema(&table)?;
    let max_visits = match a.max_visits {
        Some(0) => return Err(CliError::Usage("--max-visits must be at least 1".into())),
        Some(v) => v,
        None => default_max_visits(&table),
    };
    run.set_config([("max_visits".to_string(), max_visits.to_string())]);
    let data = assemble_sequences(&table, &schema, max_visits)?;
    run.write(&name, &data.to_bytes())?;
    print!("{}", summary_text(&data));
    run.finish()?;
    Ok(())
}

fn training_curves_svg(model: &TrainedModel, data: &SurvivalDataset) -> Result<String, CliError> {
    let bounds = model.grid.boundaries();
    let mut mean = vec![vec![0.0; bounds.len()]; model.num_events as usize];
    for seq in &data.sequences {
        let pred = model.predict(seq)?;
        for (k, s) in pred.survival.iter().enumerate() {
            for (m, v) in mean[k].iter_mut().zip(s) {
                *m += v / data.len() as f64;
            }
        }
    }
    let durations = data.durations();
    let mut series = Vec::new();
    for (k, m) in mean.iter().enumerate() {
        let pts: Vec<(f64, f64)> = bounds.iter().copied().zip(m.iter().copied()).skip(1).collect();
        series.push((format!("model, event {}", k + 1), pts));
        let observed: Vec<bool> = data.sequences.iter().map(|s| s.event == k as u32 + 1).collect();
        let km = kaplan_meier(&durations, &observed);
        series.push((format!("Kaplan-Meier, event {}", k + 1), step_points(&km)));
    }
    Ok(plot::step_curves_svg("Mean predicted survival", "time", &series))
}

fn step_points(f: &StepFunction) -> Vec<(f64, f64)> {
    f.times.iter().copied().zip(f.values.iter().copied()).collect()
}

fn cmd_train(a: &TrainArgs, args: &[String]) -> Result<(), CliError> {
    let mut run = Run::start("train", args, &a.out, MANIFEST_FILE)?;
    let config = load_config(&mut run, &a.config)?;
    let data = load_dataset(&mut run, &a.data)?;
    let (train_set, val_set) = early_stopping_split(&data, config.val_fraction, config.seed);
    let model = train_with(&config, &train_set, &val_set, Execution::default())?;
    run.write("checkpoint.ssq", &model.to_bytes())?;
    run.write("history.csv", model.history_csv().as_bytes())?;
    run.write("config.toml", config.canonical_text().as_bytes())?;
    run.write("survival_curves.svg", training_curves_svg(&model, &data)?.as_bytes())?;
    let last = model.history.last();
    println!(
        "trained {} epochs, best validation loss {:.6}",
        model.history.len(),
        model.history.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min)
    );
    if let Some(r) = last {
        println!("final training loss {:.6}", r.train_loss);
    }
    run.finish()?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GeneratorFile {
    fraction: Option<f64>,
    jitter_scale: Option<f64>,
    duration_jitter: Option<f64>,
    seed: Option<u64>,
}

fn augmentation(
    run: &mut Run,
    spec: &str,
    fraction: Option<f64>,
    data: &SurvivalDataset,
    seed: u64,
) -> Result<Augmentation, CliError> {
    let mut g = GeneratorConfig::for_dataset(data, seed);
    if spec.ends_with(".csv") {
        let path = Path::new(spec);
        run.input(path)?;
        let feature_spec: FeatureSpec = data.schema.feature_kinds().into_iter().collect();
        let table = parse_long_csv(path, &feature_spec)?;
        if fraction.is_some() {
            return Err(CliError::Usage("--fraction does not apply to a synthetic CSV".into()));
        }
        return Ok(Augmentation::Fixed(import_synthetic(&table, data)?));
    } else if spec != "baseline" {
        let path = Path::new(spec);
        let bytes = run.input(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::Input(format!("{spec}: not UTF-8")))?;
        let file: GeneratorFile = toml::from_str(&text).map_err(|e| CliError::Input(format!("{spec}: {}", e.message())))?;
        g.fraction = file.fraction.unwrap_or(g.fraction);
        g.jitter_scale = file.jitter_scale.unwrap_or(g.jitter_scale);
        g.duration_jitter = file.duration_jitter.unwrap_or(g.duration_jitter);
        g.seed = file.seed.unwrap_or(g.seed);
    }
    if let Some(f) = fraction {
        g.fraction = f;
    }
    run.set_config([
        ("augment.fraction".to_string(), g.fraction.to_string()),
        ("augment.jitter_scale".to_string(), g.jitter_scale.to_string()),
        ("augment.duration_jitter".to_string(), g.duration_jitter.to_string()),
        ("augment.seed".to_string(), g.seed.to_string()),
    ]);
    Ok(Augmentation::Generator(g))
}

fn write_cv(run: &mut Run, prefix: &str, report: &CvReport) -> Result<(), CliError> {
    run.write(&format!("{prefix}folds.csv"), report.folds_csv().as_bytes())?;
    run.write(&format!("{prefix}aggregate.csv"), report.aggregate_csv().as_bytes())?;
    for (f, rep) in report.folds.iter().enumerate() {
        run.write(&format!("{prefix}fold{f}/metrics.csv"), rep.to_csv().as_bytes())?;
    }
    Ok(())
}

/// Baseline against augmented aggregates, one line per event and quantile.
pub fn comparison_csv(base: &CvReport, aug: &CvReport) -> String {
    let mut out = String::from(
        "event,quantile,c_td_baseline,c_td_augmented,c_td_diff,brier_baseline,brier_augmented,brier_diff\n",
    );
    for b in &base.aggregate {
        if let Some(x) = aug.aggregate_row(b.event, b.quantile) {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.event,
                b.quantile,
                b.c_td_mean,
                x.c_td_mean,
                x.c_td_mean - b.c_td_mean,
                b.brier_mean,
                x.brier_mean,
                x.brier_mean - b.brier_mean
            );
        }
    }
    out
}

fn cv_bars(reports: &[(&str, &CvReport)]) -> String {
    let first = reports[0].1;
    let categories: Vec<String> = first
        .aggregate
        .iter()
        .map(|r| format!("e{} q{:.2}", r.event, r.quantile))
        .collect();
    let series: Vec<(String, Vec<f64>, Vec<f64>)> = reports
        .iter()
        .map(|(name, rep)| {
            let rows: Vec<_> = first
                .aggregate
                .iter()
                .map(|r| rep.aggregate_row(r.event, r.quantile))
                .collect();
            (
                name.to_string(),
                rows.iter().map(|r| r.map_or(f64::NAN, |r| r.c_td_mean)).collect(),
                rows.iter().map(|r| r.map_or(0.0, |r| r.c_td_std)).collect(),
            )
        })
        .collect();
    plot::grouped_bars_svg("Cross-validated C_td", "C_td", &categories, &series)
}

fn cmd_cv(a: &CvArgs, args: &[String]) -> Result<(), CliError> {
    check_quantiles(&a.quantiles)?;
    if a.folds < 2 {
        return Err(CliError::Usage("--folds must be at least 2".into()));
    }
    let mut run = Run::start("cv", args, &a.out, MANIFEST_FILE)?;
    let config = load_config(&mut run, &a.config)?;
    let data = load_dataset(&mut run, &a.data)?;
    let mut opts = CvOptions {
        folds: a.folds,
        seed: config.seed,
        eval: EvalOptions {
            quantiles: a.quantiles.clone(),
            ipcw_brier: a.ipcw_brier,
            ..EvalOptions::default()
        },
        augmentation: None,
        execution: Execution::default(),
    };
    run.set_config([("cv.folds".to_string(), a.folds.to_string())]);
    let spec = a
        .augment
        .clone()
        .or_else(|| a.synthetic_csv.as_ref().map(|p| p.display().to_string()));
    if a.synthetic_csv.as_ref().is_some_and(|p| p.extension().is_none_or(|e| e != "csv")) {
        return Err(CliError::Usage("--synthetic-csv expects a .csv file".into()));
    }
    let augmentation = match &spec {
        Some(spec) => Some(augmentation(&mut run, spec, a.fraction, &data, config.seed)?),
        None if a.fraction.is_some() => return Err(CliError::Usage("--fraction needs --augment".into())),
        None => None,
    };

    let base = cross_validate(&config, &data, &opts)?;
    write_cv(&mut run, "", &base)?;
    println!("baseline\n{}", base.to_table());
    match augmentation {
        None => {
            run.write("cv_comparison.svg", cv_bars(&[("baseline", &base)]).as_bytes())?;
        }
        Some(aug) => {
            opts.augmentation = Some(aug);
            let augmented = cross_validate(&config, &data, &opts)?;
            write_cv(&mut run, "augmented/", &augmented)?;
            let cmp = comparison_csv(&base, &augmented);
            run.write("comparison.csv", cmp.as_bytes())?;
            run.write(
                "cv_comparison.svg",
                cv_bars(&[("baseline", &base), ("augmented", &augmented)]).as_bytes(),
            )?;
            println!("augmented\n{}", augmented.to_table());
        }
    }
    run.finish()?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, args: &[String]) -> Result<(), CliError> {
    check_quantiles(&a.quantiles)?;
    let dir = a.out.clone().unwrap_or_else(std::env::temp_dir);
    let mut run = Run::start("evaluate", args, &dir, MANIFEST_FILE)?;
    run.input(&a.checkpoint)?;
    let model = TrainedModel::load(&a.checkpoint)?;
    let data = load_dataset(&mut run, &a.data)?;
    model.check_compatible(&data)?;
    let opts = EvalOptions {
        quantiles: a.quantiles.clone(),
        ipcw_brier: a.ipcw_brier,
        ..EvalOptions::default()
    };
    let report = evaluate_model(&model, &data, &opts)?;
    print!("{}", report.to_table());
    if a.out.is_some() {
        run.write("metrics.csv", report.to_csv().as_bytes())?;
        run.finish()?;
    } else {
        print!("\n{}", report.to_csv());
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs, args: &[String]) -> Result<(), CliError> {
    let mut run = Run::start("synth", args, &a.out, MANIFEST_FILE)?;
    let data = load_dataset(&mut run, &a.data)?;
    run.set_seed(a.seed);
    let real_idx: Vec<usize> = (0..data.len()).filter(|&i| !data.sequences[i].is_synthetic()).collect();
    let real = data.subset(&real_idx);
    let synthetic = if a.self_test {
        run.set_config([("self_test".to_string(), "true".to_string())]);
        real.clone()
    } else {
        let mut g = GeneratorConfig::for_dataset(&real, a.seed);
        g.fraction = a.fraction.unwrap_or(g.fraction);
        g.jitter_scale = a.jitter_scale.unwrap_or(g.jitter_scale);
        g.duration_jitter = a.duration_jitter.unwrap_or(g.duration_jitter);
        run.set_config([
            ("fraction".to_string(), g.fraction.to_string()),
            ("jitter_scale".to_string(), g.jitter_scale.to_string()),
            ("duration_jitter".to_string(), g.duration_jitter.to_string()),
        ]);
        generate(&real, &g)?
    };
    let horizon = match a.horizon {
        Some(t) => t,
        None => real.durations().into_iter().fold(0.0, f64::max),
    };
    run.set_config([("horizon".to_string(), horizon.to_string())]);
    let report = optimism(&real, &synthetic, horizon)?;

    let mut csv = Vec::new();
    write_long_csv(&synthetic, &mut csv)?;
    run.write("synthetic.csv", &csv)?;
    run.write("synthetic_spec.json", (feature_spec_json(&synthetic.schema) + "\n").as_bytes())?;
    run.write("optimism.csv", report.summary_csv().as_bytes())?;
    run.write("optimism_curves.csv", report.curves_csv().as_bytes())?;
    let svg = plot::step_curves_svg(
        "Kaplan-Meier survival, real vs synthetic",
        "time",
        &[
            ("real".to_string(), step_points(&report.curve_real)),
            ("synthetic".to_string(), step_points(&report.curve_syn)),
        ],
    );
    run.write("survival_curves.svg", svg.as_bytes())?;
    println!(
        "synthetic records {} from {} real visits ({} patients)",
        synthetic.total_visits(),
        real.total_visits(),
        synthetic.len()
    );
    println!("optimism {} (T = {horizon})", report.value);
    run.finish()?;
    Ok(())
}
