//! The `prism` command line.
//!
//! Every subcommand takes `--config file.json` whose keys are the long flag names;
//! precedence is flag, then file, then built-in default. The resolved settings
//! are printed to stderr before the command runs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::embedding::{
    load_embedding_csv, load_embedding_set, normalize, partition_by_group, EmbeddingSet, SetKind,
};
use crate::error::{Error, ErrorKind};
use crate::loss::Pairing;
use crate::ortho::{orthogonal_projection, AttributeMatrix, DEFAULT_RANK_TOL};
use crate::projection::{load_projection, save_projection};
use crate::sweep::{parse_values, run_sweep, write_sweep_csv, SweepParam};
use crate::synthetic::{self, SynthConfig};
use crate::trainer::{train_projection, Init, TrainConfig};
use crate::zeroshot::{
    classify, group_metrics, read_metrics, read_predictions, write_metrics, write_predictions,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "prism",
    version,
    about = "Embedding-space debiasing for vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a planted-bias synthetic bundle.
    Synth(SynthArgs),
    /// Learn a debiasing projection from scene descriptions.
    Train(TrainArgs),
    /// Build the closed-form projector removing attribute directions.
    Ortho(OrthoArgs),
    /// Zero-shot classify images, optionally in a projected space.
    Classify(ClassifyArgs),
    /// Group-robustness metrics from a predictions CSV.
    Eval(EvalArgs),
    /// Margin or description-count grid over the learned projection.
    Sweep(SweepArgs),
    /// Check a file written by (or for) this kit.
    Validate(ValidateArgs),
}

/// Flag values or a config file's contents; both sides use the same keys.
trait Overlay: Sized + DeserializeOwned {
    fn config_path(&self) -> Option<&Path>;
    fn overlay(self, file: Self) -> Self;
}

macro_rules! overlay_impl {
    ($ty:ty; $($field:ident),* $(; flags $($flag:ident),*)?) => {
        impl Overlay for $ty {
            fn config_path(&self) -> Option<&Path> {
                self.config.as_deref()
            }
            fn overlay(self, file: Self) -> Self {
                Self {
                    config: self.config,
                    $($field: self.$field.or(file.$field),)*
                    $($($flag: self.$flag || file.$flag,)*)?
                }
            }
        }
    };
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SynthArgs {
    /// Synthetic generator configuration (JSON).
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Scene-description embeddings (EMBF or CSV).
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// template_matched, group_mean or all_pairs.
    #[arg(long)]
    pairing: Option<Pairing>,
    /// Start from identity plus Gaussian noise of this standard deviation.
    #[arg(long)]
    init_noise: Option<f64>,
    /// Output projection (PRISMP).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional per-step loss history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct OrthoArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Attribute embeddings (EMBF or CSV).
    #[arg(long)]
    attributes: Option<PathBuf>,
    #[arg(long)]
    rank_tol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ClassifyArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    projection: Option<PathBuf>,
    /// Score with raw inner products of projected vectors (no renormalisation).
    #[arg(long)]
    #[serde(default)]
    raw_scores: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    preds: Option<PathBuf>,
    /// Metrics JSON of the run to compare against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// margin or n_descriptions.
    #[arg(long)]
    param: Option<String>,
    /// `start:stop:step` (inclusive) or a comma-separated list.
    #[arg(long)]
    values: Option<String>,
    /// Directory written by `prism synth`; stands in for the three inputs below.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    descriptions: Option<PathBuf>,
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairing: Option<Pairing>,
    #[arg(long)]
    #[serde(default)]
    raw_scores: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct ValidateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// EMBF set, CSV fixture, PRISMP projection, predictions CSV or metrics JSON.
    #[arg(long)]
    set: Option<PathBuf>,
    /// Set kind for CSV fixtures.
    #[arg(long)]
    kind: Option<String>,
}

overlay_impl!(SynthArgs; seed, out);
overlay_impl!(TrainArgs; descriptions, margin, lr, batch, epochs, seed, pairing, init_noise, out, history);
overlay_impl!(OrthoArgs; attributes, rank_tol, out);
overlay_impl!(ClassifyArgs; images, prompts, projection, out; flags raw_scores);
overlay_impl!(EvalArgs; preds, baseline, out);
overlay_impl!(SweepArgs; param, values, bundle, descriptions, images, prompts, margin, lr, batch, epochs, seed,
    pairing, out; flags raw_scores);
overlay_impl!(ValidateArgs; set, kind);

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| usage(format!("config file {}: {e}", path.display())))
}

fn resolve<A: Overlay>(args: A) -> CliResult<A> {
    match args.config_path().map(Path::to_path_buf) {
        Some(path) => {
            let file: A = read_json(&path)?;
            Ok(args.overlay(file))
        }
        None => Ok(args),
    }
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| usage(format!("missing required --{flag}")))
}

fn print_config(command: &str, resolved: &impl Serialize) {
    let json = serde_json::to_string(resolved).unwrap_or_default();
    eprintln!("prism {command}: resolved config {json}");
}

/// Loads an EMBF set (or CSV fixture), checks its kind and rescales to unit norm.
fn load_input(path: &Path, kind: SetKind) -> CliResult<EmbeddingSet> {
    let set = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        load_embedding_csv(path, kind)?
    } else {
        load_embedding_set(path)?
    };
    if set.kind() != kind {
        return Err(Error::invalid(format!(
            "{}: expected a {} set, found {}",
            path.display(),
            kind.as_str(),
            set.kind().as_str()
        ))
        .into());
    }
    Ok(normalize(&set)?)
}

fn train_config(
    margin: Option<f64>,
    lr: Option<f64>,
    batch: Option<usize>,
    epochs: Option<usize>,
    seed: Option<u64>,
    pairing: Option<Pairing>,
    init_noise: Option<f64>,
) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        margin: margin.unwrap_or(d.margin),
        learning_rate: lr.unwrap_or(d.learning_rate),
        batch_size: batch.unwrap_or(d.batch_size),
        epochs: epochs.unwrap_or(d.epochs),
        seed: seed.unwrap_or(d.seed),
        pairing: pairing.unwrap_or(d.pairing),
        init: init_noise.map_or(Init::Identity, |sigma| Init::IdentityPlusNoise { sigma }),
        ..d
    }
}

fn cmd_synth(args: SynthArgs) -> CliResult<()> {
    let mut config: SynthConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let out = required(args.out, "out")?;
    print_config("synth", &config);
    let bundle = synthetic::generate(&config)?;
    synthetic::write_bundle(&bundle, &out)?;
    println!(
        "wrote {} images, {} prompts, {} descriptions, {} attributes to {}",
        bundle.images.len(),
        bundle.class_prompts.len(),
        bundle.descriptions.len(),
        bundle.attributes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let descriptions = required(args.descriptions, "descriptions")?;
    let out = required(args.out, "out")?;
    let config = train_config(
        args.margin,
        args.lr,
        args.batch,
        args.epochs,
        args.seed,
        args.pairing,
        args.init_noise,
    );
    print_config(
        "train",
        &serde_json::json!({
            "descriptions": descriptions, "out": out, "history": args.history, "train": config,
        }),
    );
    config.validate().map_err(|e| usage(e.to_string()))?;
    let set = load_input(&descriptions, SetKind::SceneDescription)?;
    let report = train_projection(&set, &config)?;
    save_projection(&report.final_projection, &out)?;
    if let Some(path) = &args.history {
        let csv_err = |source| Error::Csv {
            path: path.clone(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "intra_class", "inter_class", "total"])
            .map_err(csv_err)?;
        for (step, l) in &report.loss_history {
            w.write_record([
                step.to_string(),
                l.intra_class.to_string(),
                l.inter_class.to_string(),
                l.total.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    println!(
        "trained {} steps: pool loss {:.6} -> {:.6}; wrote {}",
        report.steps,
        report.initial_loss.total,
        report.final_loss.total,
        out.display()
    );
    Ok(())
}

fn cmd_ortho(args: OrthoArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let attributes = required(args.attributes, "attributes")?;
    let out = required(args.out, "out")?;
    let rank_tol = args.rank_tol.unwrap_or(DEFAULT_RANK_TOL);
    print_config(
        "ortho",
        &serde_json::json!({ "attributes": attributes, "rank-tol": rank_tol, "out": out }),
    );
    let set = load_input(&attributes, SetKind::Attribute)?;
    let attrs = AttributeMatrix::from_embedding_set(&set)?;
    let p = orthogonal_projection(&attrs, rank_tol)?;
    save_projection(&p, &out)?;
    let removed = crate::ortho::span_basis(&attrs, rank_tol).ncols();
    println!(
        "removed a {removed}-dimensional attribute span from {} columns; wrote {}",
        attrs.num_columns(),
        out.display()
    );
    Ok(())
}

fn cmd_classify(args: ClassifyArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let images = required(args.images, "images")?;
    let prompts = required(args.prompts, "prompts")?;
    let out = required(args.out, "out")?;
    print_config(
        "classify",
        &serde_json::json!({
            "images": images, "prompts": prompts, "projection": args.projection,
            "raw-scores": args.raw_scores, "out": out,
        }),
    );
    let image_set = load_input(&images, SetKind::Image)?;
    let prompt_set = load_input(&prompts, SetKind::ClassPrompt)?;
    let projection = args.projection.as_deref().map(load_projection).transpose()?;
    let preds = classify(&image_set, &prompt_set, projection.as_ref(), args.raw_scores)?;
    write_predictions(&preds, &out)?;
    println!(
        "classified {} images into {} classes; wrote {}",
        preds.predictions.len(),
        preds.num_classes,
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let preds_path = required(args.preds, "preds")?;
    let out = required(args.out, "out")?;
    print_config(
        "eval",
        &serde_json::json!({ "preds": preds_path, "baseline": args.baseline, "out": out }),
    );
    let preds = read_predictions(&preds_path)?;
    let baseline = args.baseline.as_deref().map(read_metrics).transpose()?;
    let metrics = group_metrics(&preds, baseline.as_ref())?;
    write_metrics(&metrics, &out)?;
    print!("{}", metrics.table());
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let param: SweepParam = required(args.param, "param")?
        .parse()
        .map_err(|e: Error| usage(e.to_string()))?;
    let values = parse_values(&required(args.values, "values")?).map_err(|e| usage(e.to_string()))?;
    let out = required(args.out, "out")?;
    let pick = |explicit: Option<PathBuf>, file: &str, flag: &str| -> CliResult<PathBuf> {
        explicit
            .or_else(|| args.bundle.as_ref().map(|b| b.join(file)))
            .ok_or_else(|| usage(format!("missing --{flag} (or --bundle)")))
    };
    let descriptions = pick(
        args.descriptions.clone(),
        synthetic::DESCRIPTIONS_FILE,
        "descriptions",
    )?;
    let images = pick(args.images.clone(), synthetic::IMAGES_FILE, "images")?;
    let prompts = pick(args.prompts.clone(), synthetic::PROMPTS_FILE, "prompts")?;
    let base = train_config(
        args.margin,
        args.lr,
        args.batch,
        args.epochs,
        args.seed,
        args.pairing,
        None,
    );
    print_config(
        "sweep",
        &serde_json::json!({
            "param": param.as_str(), "values": values, "descriptions": descriptions, "images": images,
            "prompts": prompts, "raw-scores": args.raw_scores, "out": out, "train": base,
        }),
    );
    base.validate().map_err(|e| usage(e.to_string()))?;
    let rows = run_sweep(
        &load_input(&descriptions, SetKind::SceneDescription)?,
        &load_input(&images, SetKind::Image)?,
        &load_input(&prompts, SetKind::ClassPrompt)?,
        param,
        &values,
        &base,
        args.raw_scores,
    )?;
    write_sweep_csv(&rows, &out)?;
    println!("{:>8}  {:>7}  {:>7}  {:>7}", param.as_str(), "WG", "Acc", "Gap");
    for r in &rows {
        println!(
            "{:>8}  {:>6.1}%  {:>6.1}%  {:>6.1}%",
            r.value,
            100.0 * r.worst_group,
            100.0 * r.accuracy,
            100.0 * r.gap
        );
    }
    Ok(())
}

fn cmd_validate(args: ValidateArgs) -> CliResult<()> {
    let args = resolve(args)?;
    let path = required(args.set, "set")?;
    print_config("validate", &serde_json::json!({ "set": path, "kind": args.kind }));
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase();
    let is_projection = ext == "prismp" || path.join("projection.json").is_file();
    if is_projection {
        let p = load_projection(&path)?;
        println!("{}: valid PRISMP projection, dim {}", path.display(), p.dim());
        return Ok(());
    }
    if ext == "json" {
        let m = read_metrics(&path)?;
        println!(
            "{}: valid metrics, {} groups",
            path.display(),
            m.per_group_accuracy.len()
        );
        return Ok(());
    }
    if ext == "csv" {
        let header = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if header.starts_with("id,true_class,") {
            let preds = read_predictions(&path)?;
            println!(
                "{}: valid predictions, {} rows, K={}",
                path.display(),
                preds.predictions.len(),
                preds.num_classes
            );
            return Ok(());
        }
        let kind: SetKind = required(args.kind, "kind (needed for CSV fixtures)")?
            .parse()
            .map_err(|e: Error| usage(e.to_string()))?;
        let set = load_embedding_csv(&path, kind)?;
        report_set(&path, &set);
        return Ok(());
    }
    let set = load_embedding_set(&path)?;
    report_set(&path, &set);
    Ok(())
}

fn report_set(path: &Path, set: &EmbeddingSet) {
    let unit = set.check_unit_norm().is_ok();
    let groups = partition_by_group(set).map(|g| g.len()).ok();
    println!(
        "{}: valid {} set, {} records, dim {}, unit-norm: {}{}",
        path.display(),
        set.kind().as_str(),
        set.len(),
        set.dim(),
        if unit { "yes" } else { "no (normalised on ingest)" },
        groups.map(|g| format!(", {g} groups")).unwrap_or_default()
    );
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("PRISM_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        usage(format!(
            "PRISM_THREADS must be a non-negative integer, got `{raw}`"
        ))
    })?;
    if n > 0 {
        // fails only if a global pool already exists, which keeps the first setting
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Ortho(a) => cmd_ortho(a),
        Command::Classify(a) => cmd_classify(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Validate(a) => cmd_validate(a),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Numerical => EXIT_NUMERICAL,
                ErrorKind::Data => EXIT_DATA,
            }
        }
    }
}
