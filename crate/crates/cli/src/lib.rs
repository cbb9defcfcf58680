//! Subcommands of the `splinecp` binary.
//!
//! Each stage reads the previous stage's files, writes its own outputs and
//! a `config.json` holding the fully resolved arguments.

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use spline_conformal::conformal::{
    CalibrationResult, ConformalError, PredictionSet, ScoreKind, Scorer, DEFAULT_BISECTION_STEPS,
};
use spline_conformal::data::{
    format_f64, load_csv, preprocess, synthetic_bimodal, DataError, DatasetBundle, RawDataset,
    Split,
};
use spline_conformal::metrics::{
    normalization_constant, EvalReport, MetricsError, NORMALIZATION_BINS,
};
use spline_conformal::model::{
    train_hist, train_spline, Checkpoint, CheckpointError, LogEntry, ModelError, ModelKind,
    TrainConfig, TrainedNet, DEFAULT_MIN_SPACING,
};
use spline_conformal::output::{extended_f64, to_json_line, to_json_pretty};
use spline_conformal::spline::{Degree, IntervalUnion};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed {path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl CliError {
    /// 2 configuration, 3 I/O, 4 data, 5 training, 6 stored-file format,
    /// 7 calibration or evaluation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(ModelError::Config(_)) => 2,
            CliError::Io { .. }
            | CliError::Checkpoint(CheckpointError::Io { .. })
            | CliError::Data(DataError::Io { .. }) => 3,
            CliError::Data(_) => 4,
            CliError::Model(_) | CliError::Checkpoint(CheckpointError::Model(_)) => 5,
            CliError::Format { .. } | CliError::Checkpoint(_) => 6,
            CliError::Conformal(_) | CliError::Metrics(_) => 7,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "splinecp",
    version,
    about = "Spline conditional densities with conformal prediction sets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the bimodal synthetic dataset as CSV.
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint.
    Train(TrainArgs),
    /// Compute conformal cutoffs on the calibration split.
    Calibrate(CalibrateArgs),
    /// Build prediction sets and coverage reports.
    Evaluate(EvaluateArgs),
    /// Run synth (when no data is given), train, calibrate and evaluate.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// CSV file with one header row.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub target_col: String,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value = "spice-nd")]
    pub model: ModelKind,
    /// Spline degree.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub degree: u8,
    #[arg(long, default_value_t = 31)]
    pub knots: usize,
    /// Histogram classifier bins.
    #[arg(long, default_value_t = 21)]
    pub bins: usize,
    #[arg(long, default_value_t = DEFAULT_MIN_SPACING)]
    pub min_spacing: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    /// Run seed: weight initialization, shuffling and the non-test splits.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50_000)]
    pub max_batches: usize,
    #[arg(long, default_value_t = 512)]
    pub batch_size: usize,
    /// Passes without validation improvement before stopping.
    #[arg(long, default_value_t = 125)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Score to calibrate; defaults to the checkpoint's model.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Miscoverage level; repeat for several.
    #[arg(long = "alpha", default_values_t = vec![0.1])]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub calibration: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test", value_parser = parse_eval_split)]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_BISECTION_STEPS)]
    pub bisection_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PipelineArgs {
    /// CSV input; synthetic data is generated when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub target_col: String,
    /// Synthetic sample count.
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    /// Seed of the synthetic data, independent of the run seed.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long = "alpha", default_values_t = vec![0.1])]
    pub alphas: Vec<f64>,
    #[arg(long, default_value = "test", value_parser = parse_eval_split)]
    pub split: Split,
    #[arg(long, default_value_t = DEFAULT_BISECTION_STEPS)]
    pub bisection_steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_eval_split(s: &str) -> Result<Split, String> {
    match s.parse::<Split>()? {
        sp @ (Split::Test | Split::CalVal) => Ok(sp),
        other => Err(format!(
            "cannot evaluate on the '{other}' split; use test or calval"
        )),
    }
}

/// Contents of `calibration.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub model: ModelKind,
    /// Calibration targets outside the train range, clamped for scoring.
    pub clamped_targets: usize,
    pub results: Vec<CalibrationResult>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub model: ModelKind,
    pub split: Split,
    pub clamped_targets: usize,
    pub reports: Vec<EvalReport>,
}

#[derive(Serialize)]
struct SetRecord<'a> {
    sample: usize,
    kind: ScoreKind,
    alpha: f64,
    #[serde(with = "extended_f64")]
    q_hat: f64,
    intervals: Vec<[f64; 2]>,
    size: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bins: Option<&'a [usize]>,
}

#[derive(Serialize)]
struct StageConfig<'a, T: Serialize> {
    command: &'a str,
    #[serde(flatten)]
    args: &'a T,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_config<T: Serialize>(dir: &Path, command: &str, args: &T) -> Result<(), CliError> {
    let text = to_json_pretty(&StageConfig { command, args }).expect("arguments are serializable");
    write_text(&dir.join("config.json"), &text)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf, CliError> {
    if args.count < 2 {
        return Err(CliError::Config(format!(
            "count must be at least 2, got {}",
            args.count
        )));
    }
    ensure_dir(&args.out)?;
    let path = args.out.join("data.csv");
    synthetic_bimodal(args.count, args.seed).write_csv(&path)?;
    write_config(&args.out, "synth", args)?;
    Ok(path)
}

fn validate_model_args(m: &ModelArgs) -> Result<(), CliError> {
    if m.model.is_spline() {
        if m.knots < 2 {
            return Err(CliError::Config(format!(
                "--knots must be at least 2, got {}",
                m.knots
            )));
        }
        if !(m.min_spacing > 0.0 && m.min_spacing < 1.0 / m.knots as f64) {
            return Err(CliError::Config(format!(
                "--min-spacing must lie in (0, 1/{}), got {}",
                m.knots, m.min_spacing
            )));
        }
    } else if m.bins < 2 {
        return Err(CliError::Config(format!(
            "--bins must be at least 2, got {}",
            m.bins
        )));
    }
    Ok(())
}

fn train_config(t: &TrainingArgs) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        lr: t.lr,
        weight_decay: t.weight_decay,
        batch_size: t.batch_size,
        max_batches: t.max_batches,
        patience_passes: t.patience,
        seed: t.seed,
        ..TrainConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn validate_alphas(alphas: &[f64]) -> Result<(), CliError> {
    if alphas.is_empty() {
        return Err(CliError::Config("at least one --alpha is required".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
        return Err(CliError::Config(format!(
            "--alpha must lie in (0, 1), got {a}"
        )));
    }
    Ok(())
}

fn write_train_log(path: &Path, log: &[LogEntry]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["step", "train_loss", "val_loss", "lr"])
        .map_err(csv_err(path))?;
    for e in log {
        w.write_record([
            e.step.to_string(),
            format_f64(e.train_loss),
            format_f64(e.val_loss),
            format_f64(e.lr),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Trains on an already loaded dataset; shared by `train` and `pipeline`.
fn train_on(
    raw: &RawDataset,
    model: &ModelArgs,
    training: &TrainingArgs,
    out: &Path,
) -> Result<Checkpoint, CliError> {
    let config = train_config(training)?;
    let bundle = preprocess(raw, config.seed)?;
    let (net, best_val_loss, best_step, log) = if model.model.is_spline() {
        let degree = Degree::try_from(model.degree).map_err(CliError::Config)?;
        let o = train_spline(&bundle, &config, degree, model.knots, model.min_spacing)?;
        (
            TrainedNet::Spline(o.model),
            o.best_val_loss,
            o.best_step,
            o.log,
        )
    } else {
        let o = train_hist(&bundle, &config, model.bins)?;
        (
            TrainedNet::Hist(o.model),
            o.best_val_loss,
            o.best_step,
            o.log,
        )
    };
    write_train_log(&out.join("train_log.csv"), &log)?;
    let checkpoint = Checkpoint {
        kind: model.model,
        net,
        x_scaler: bundle.x_scaler.clone(),
        y_scaler: bundle.y_scaler,
        config,
        best_val_loss,
        best_step,
    };
    checkpoint.save(&out.join("checkpoint.json"))?;
    log::info!(
        "trained {} for {} batches, best validation loss {} at batch {}",
        model.model,
        log.last().map_or(0, |e| e.step),
        best_val_loss,
        best_step
    );
    Ok(checkpoint)
}

pub fn cmd_train(args: &TrainArgs) -> Result<Checkpoint, CliError> {
    validate_model_args(&args.model)?;
    train_config(&args.training)?;
    let raw = load_csv(&args.data.data, &args.data.target_col)?;
    ensure_dir(&args.out)?;
    write_config(&args.out, "train", args)?;
    train_on(&raw, &args.model, &args.training, &args.out)
}

/// Rebuilds the training-time splits and checks they match the checkpoint.
pub fn bundle_for(checkpoint: &Checkpoint, raw: &RawDataset) -> Result<DatasetBundle, CliError> {
    let bundle = preprocess(raw, checkpoint.config.seed)?;
    if bundle.features() != checkpoint.input_dim()
        || bundle.x_scaler != checkpoint.x_scaler
        || bundle.y_scaler != checkpoint.y_scaler
    {
        return Err(CliError::Config(
            "dataset does not match the one the checkpoint was trained on".into(),
        ));
    }
    Ok(bundle)
}

fn score_kind(kind: ModelKind) -> ScoreKind {
    match kind {
        ModelKind::SpiceNd => ScoreKind::Nd,
        ModelKind::SpiceHpd => ScoreKind::Hpd,
        ModelKind::Hist => ScoreKind::Hist,
    }
}

fn scorer(checkpoint: &Checkpoint, kind: ScoreKind, steps: usize) -> Result<Scorer<'_>, CliError> {
    match (kind, &checkpoint.net) {
        (ScoreKind::Nd, TrainedNet::Spline(m)) => Ok(Scorer::Nd(m)),
        (ScoreKind::Hpd, TrainedNet::Spline(m)) => Ok(Scorer::Hpd { model: m, steps }),
        (ScoreKind::Hist, TrainedNet::Hist(m)) => Ok(Scorer::Hist(m)),
        (kind, _) => Err(CliError::Config(format!(
            "a {} checkpoint cannot produce {kind} scores",
            checkpoint.kind
        ))),
    }
}

fn calibrate_on(
    checkpoint: &Checkpoint,
    bundle: &DatasetBundle,
    model: ModelKind,
    alphas: &[f64],
) -> Result<CalibrationFile, CliError> {
    validate_alphas(alphas)?;
    let scorer = scorer(checkpoint, score_kind(model), DEFAULT_BISECTION_STEPS)?;
    let cal = bundle.split(Split::Cal);
    let batch = scorer.scores(&cal.x, &cal.y)?;
    let results = alphas
        .iter()
        .map(|&a| spline_conformal::conformal::calibrate(&batch.scores, a, scorer.kind()))
        .collect::<Result<_, _>>()?;
    Ok(CalibrationFile {
        model,
        clamped_targets: batch.clamped,
        results,
    })
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrationFile, CliError> {
    validate_alphas(&args.alphas)?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let raw = load_csv(&args.data.data, &args.data.target_col)?;
    let bundle = bundle_for(&checkpoint, &raw)?;
    let model = args.model.unwrap_or(checkpoint.kind);
    let file = calibrate_on(&checkpoint, &bundle, model, &args.alphas)?;
    ensure_dir(&args.out)?;
    write_config(&args.out, "calibrate", args)?;
    write_text(
        &args.out.join("calibration.json"),
        &to_json_pretty(&file).expect("calibration is serializable"),
    )?;
    Ok(file)
}

fn unscale(set: &IntervalUnion, bundle: &DatasetBundle) -> IntervalUnion {
    set.affine(bundle.y_scaler.range(), bundle.y_scaler.min)
}

fn evaluate_on(
    checkpoint: &Checkpoint,
    bundle: &DatasetBundle,
    calibration: &CalibrationFile,
    split: Split,
    steps: usize,
    out: &Path,
) -> Result<ReportFile, CliError> {
    if steps == 0 {
        return Err(CliError::Config(
            "--bisection-steps must be at least 1".into(),
        ));
    }
    let kind = score_kind(calibration.model);
    let scorer = scorer(checkpoint, kind, steps)?;
    let view = bundle.split(split);
    if view.is_empty() {
        return Err(CliError::Config(format!("split '{split}' is empty")));
    }
    let clamped_targets = view.y.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
    if clamped_targets > 0 {
        log::info!("{clamped_targets} {split} targets fall outside the train range");
    }
    let train_y = bundle.split(Split::Train).y_raw;
    let cal_y = bundle.split(Split::Cal).y_raw;

    let sets_path = out.join("sets.jsonl");
    let mut sets_file =
        std::io::BufWriter::new(fs::File::create(&sets_path).map_err(io_err(&sets_path))?);
    let mut reports = Vec::with_capacity(calibration.results.len());
    let mut all_sizes = Vec::new();
    for cal in &calibration.results {
        if cal.kind != kind {
            return Err(ConformalError::KindMismatch {
                expected: kind,
                found: cal.kind,
            }
            .into());
        }
        let sets: Vec<PredictionSet> = scorer.sets(&view.x, cal)?;
        let unscaled: Vec<IntervalUnion> =
            sets.iter().map(|s| unscale(&s.intervals, bundle)).collect();
        for ((row, set), orig) in view.rows.iter().zip(&sets).zip(&unscaled) {
            let record = SetRecord {
                sample: *row,
                kind,
                alpha: cal.alpha,
                q_hat: cal.q_hat,
                intervals: orig.to_pairs(),
                size: orig.size(),
                bins: set.bins.as_deref(),
            };
            let line = to_json_line(&record).expect("set record is serializable");
            writeln!(sets_file, "{line}").map_err(io_err(&sets_path))?;
        }
        let norm = normalization_constant(&train_y, &cal_y, cal.alpha, NORMALIZATION_BINS)?;
        reports.push(EvalReport::compute(
            cal.alpha,
            &unscaled,
            &view.y_raw,
            norm,
        )?);
        all_sizes.push((
            cal.alpha,
            unscaled.iter().map(IntervalUnion::size).collect::<Vec<_>>(),
        ));
    }
    sets_file.flush().map_err(io_err(&sets_path))?;
    write_size_histogram(&out.join("size_histogram.csv"), &all_sizes)?;

    let file = ReportFile {
        model: calibration.model,
        split,
        clamped_targets,
        reports,
    };
    write_text(
        &out.join("report.json"),
        &to_json_pretty(&file).expect("report is serializable"),
    )?;
    EvalReport::write_csv(&file.reports, &out.join("report.csv"))?;
    Ok(file)
}

const SIZE_HISTOGRAM_BINS: usize = 20;

fn write_size_histogram(path: &Path, sizes: &[(f64, Vec<f64>)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["alpha", "size_lo", "size_hi", "count"])
        .map_err(csv_err(path))?;
    for (alpha, values) in sizes {
        let max = values.iter().copied().fold(0.0, f64::max);
        let width = if max > 0.0 {
            max / SIZE_HISTOGRAM_BINS as f64
        } else {
            1.0
        };
        let mut counts = [0usize; SIZE_HISTOGRAM_BINS];
        for &v in values {
            counts[((v / width) as usize).min(SIZE_HISTOGRAM_BINS - 1)] += 1;
        }
        for (b, c) in counts.iter().enumerate() {
            w.write_record([
                format_f64(*alpha),
                format_f64(b as f64 * width),
                format_f64((b + 1) as f64 * width),
                c.to_string(),
            ])
            .map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

fn read_calibration(path: &Path) -> Result<CalibrationFile, CliError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<ReportFile, CliError> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let calibration = read_calibration(&args.calibration)?;
    let raw = load_csv(&args.data.data, &args.data.target_col)?;
    let bundle = bundle_for(&checkpoint, &raw)?;
    ensure_dir(&args.out)?;
    write_config(&args.out, "evaluate", args)?;
    evaluate_on(
        &checkpoint,
        &bundle,
        &calibration,
        args.split,
        args.bisection_steps,
        &args.out,
    )
}

pub fn cmd_pipeline(args: &PipelineArgs) -> Result<ReportFile, CliError> {
    validate_model_args(&args.model)?;
    validate_alphas(&args.alphas)?;
    train_config(&args.training)?;
    ensure_dir(&args.out)?;
    write_config(&args.out, "pipeline", args)?;
    let raw = match &args.data {
        Some(path) => load_csv(path, &args.target_col)?,
        None => {
            if args.count < 2 {
                return Err(CliError::Config(format!(
                    "count must be at least 2, got {}",
                    args.count
                )));
            }
            let raw = synthetic_bimodal(args.count, args.data_seed);
            raw.write_csv(&args.out.join("data.csv"))?;
            raw
        }
    };
    let checkpoint = train_on(&raw, &args.model, &args.training, &args.out)?;
    let bundle = bundle_for(&checkpoint, &raw)?;
    let calibration = calibrate_on(&checkpoint, &bundle, args.model.model, &args.alphas)?;
    write_text(
        &args.out.join("calibration.json"),
        &to_json_pretty(&calibration).expect("calibration is serializable"),
    )?;
    evaluate_on(
        &checkpoint,
        &bundle,
        &calibration,
        args.split,
        args.bisection_steps,
        &args.out,
    )
}

/// Runs one parsed command and prints a short summary.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let path = cmd_synth(&a)?;
            println!("wrote {}", path.display());
        }
        Command::Train(a) => {
            let ck = cmd_train(&a)?;
            println!(
                "best validation loss {} at batch {}; checkpoint in {}",
                ck.best_val_loss,
                ck.best_step,
                a.out.display()
            );
        }
        Command::Calibrate(a) => {
            let file = cmd_calibrate(&a)?;
            for r in &file.results {
                println!("alpha {} q_hat {} (N_cal {})", r.alpha, r.q_hat, r.n_cal);
            }
        }
        Command::Evaluate(a) => print_reports(&cmd_evaluate(&a)?),
        Command::Pipeline(a) => print_reports(&cmd_pipeline(&a)?),
    }
    Ok(())
}

fn print_reports(file: &ReportFile) {
    for r in &file.reports {
        println!(
            "{} on {}: alpha {} coverage {:.4} mean size {:.4} normalized {:.4} worst bucket {:.4}",
            file.model,
            file.split,
            r.alpha,
            r.coverage,
            r.mean_size,
            r.mean_normalized_size,
            r.worst_bucket_coverage
        );
    }
}
