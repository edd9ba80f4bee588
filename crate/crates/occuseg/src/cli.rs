//! The `occuseg` command line: synthetic data, mask generation, training,
//! evaluation, observer comparison, and overlay rendering.
//!
//! Every subcommand is deterministic given its flags and seed. Flags
//! override values from an optional `--config` TOML file whose keys mirror
//! the flag names; each run prints its fully resolved configuration as
//! `config.<key>=<value>` lines and writes it next to its outputs as
//! `<subcommand>.config.toml` so the run can be replayed.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! failure. Errors go to stderr; results go to files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, mix_seed, SynthConfig};
use crate::fsio;
use crate::hierarchy::ClassHierarchy;
use crate::loss::{LossConfig, PixelReduction};
use crate::mask::{decode_label_mask, generate_mtp_mfp, render_overlay, BinaryMask, LabelMask};
use crate::metrics::{
    self, aggregate_folds, confusion_binary, full_contact_metrics, ConfusionCounts, EvalClass,
    ImageMetrics, MetricsReport,
};
use crate::model::{self, DualBranchNet, ModelError, TrainConfig, TrainSample};

#[derive(Debug, Error)]
pub enum CliError {
    /// Input or configuration problem; exit code 2.
    #[error("{0}")]
    Input(String),
    /// Numerical failure; exit code 3.
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn input(err: impl std::fmt::Display) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<data::DataError> for CliError {
    fn from(err: data::DataError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<crate::mask::MaskError> for CliError {
    fn from(err: crate::mask::MaskError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(err: metrics::MetricsError) -> Self {
        CliError::Input(err.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> Self {
        match err {
            ModelError::Diverged { .. } => CliError::Numeric(err.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "occuseg",
    version,
    about = "Occlusal contact segmentation pipeline: synthetic data, mask generation, training, evaluation"
)]
pub struct Cli {
    /// TOML config file; keys mirror flag names, flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth known by construction.
    Synth(SynthArgs),
    /// Derive MTP/MFP multiclass masks from the AP and registration masks.
    GenMasks(GenMasksArgs),
    /// Train one model per fold with the combined hierarchical loss.
    Train(TrainArgs),
    /// Evaluate fold models on their validation splits.
    Eval(EvalArgs),
    /// Score annotator masks against reference masks, observer-study style.
    Compare(CompareArgs),
    /// Render red/green/yellow prediction-vs-target overlays.
    Render(RenderArgs),
}

/// Optional config-file values; keys mirror the flag names.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    patients: Option<usize>,
    size: Option<u32>,
    overlap: Option<f64>,
    noise: Option<f64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    folds: Option<usize>,
    fold: Option<usize>,
    augment: Option<bool>,
    loss_reduction: Option<String>,
    weights: Option<PathBuf>,
    annotations: Option<PathBuf>,
    reference: Option<PathBuf>,
    timing: Option<PathBuf>,
    pred: Option<PathBuf>,
    target: Option<PathBuf>,
    image: Option<PathBuf>,
    class: Option<String>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
            }
        }
    }
}

/// Resolved key=value pairs of a run, echoed to stdout and persisted for
/// replay.
struct ResolvedConfig {
    subcommand: &'static str,
    entries: Vec<(String, String)>,
}

impl ResolvedConfig {
    fn new(subcommand: &'static str) -> Self {
        ResolvedConfig {
            subcommand,
            entries: Vec::new(),
        }
    }

    fn push(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.push((key.to_string(), value.to_string()));
    }

    fn print(&self) {
        println!("config.subcommand={}", self.subcommand);
        for (key, value) in &self.entries {
            println!("config.{key}={value}");
        }
    }

    /// TOML record mirroring the flag names, suitable as `--config` input.
    fn write_record(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = String::new();
        for (key, value) in &self.entries {
            let needs_quotes = value.parse::<f64>().is_err()
                && value != "true"
                && value != "false";
            if needs_quotes {
                writeln!(text, "{key} = {:?}", value).unwrap();
            } else {
                writeln!(text, "{key} = {value}").unwrap();
            }
        }
        let path = dir.join(format!("{}.config.toml", self.subcommand));
        fsio::write_atomic(&path, text.as_bytes())
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn parse_reduction(name: &str) -> Result<PixelReduction, CliError> {
    match name {
        "sum" => Ok(PixelReduction::Sum),
        "mean" => Ok(PixelReduction::Mean),
        other => Err(CliError::Input(format!(
            "unknown loss reduction '{other}' (expected sum or mean)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Args)]
struct SynthArgs {
    /// Number of synthetic patients.
    #[arg(long)]
    patients: Option<usize>,
    /// Square raster side length in pixels.
    #[arg(long)]
    size: Option<u32>,
    /// Confirmed fraction of the ink, in [0, 1].
    #[arg(long)]
    overlap: Option<f64>,
    /// Pixel noise amplitude.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_synth(args: SynthArgs, file: &FileConfig) -> Result<(), CliError> {
    let out = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("synth needs --out".into()))?;
    let cfg = SynthConfig {
        patients: args.patients.or(file.patients).unwrap_or(8),
        raster_size: args.size.or(file.size).unwrap_or(64),
        overlap: args.overlap.or(file.overlap).unwrap_or(0.6),
        noise: args.noise.or(file.noise).unwrap_or(6.0),
        seed: args.seed.or(file.seed).unwrap_or(0),
        ..SynthConfig::default()
    };

    let mut resolved = ResolvedConfig::new("synth");
    resolved.push("patients", cfg.patients);
    resolved.push("size", cfg.raster_size);
    resolved.push("overlap", cfg.overlap);
    resolved.push("noise", cfg.noise);
    resolved.push("seed", cfg.seed);
    resolved.push("out", out.display());
    resolved.print();

    let records = data::synth_generate(&cfg)?;
    ensure_dir(&out)?;
    data::write_dataset(&records, &out)?;
    resolved.write_record(&out)?;

    let images: usize = records.iter().map(|p| p.images.len()).sum();
    println!("patients={} images={images}", records.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-masks

#[derive(Debug, Args)]
struct GenMasksArgs {
    /// Dataset directory (masks are written next to their sources).
    #[arg(long)]
    data: Option<PathBuf>,
}

fn cmd_gen_masks(args: GenMasksArgs, file: &FileConfig) -> Result<(), CliError> {
    let root = args
        .data
        .or_else(|| file.data.clone())
        .ok_or_else(|| CliError::Input("gen-masks needs --data".into()))?;

    let mut resolved = ResolvedConfig::new("gen-masks");
    resolved.push("data", root.display());
    resolved.print();

    let patients = data::load_dataset(&root)?;
    let mut written = 0usize;
    for patient in &patients {
        for record in &patient.images {
            let label = generate_mtp_mfp(&record.ap, &patient.ofr_test, &patient.ofr_retest)
                .map_err(|e| CliError::Input(format!("patient {}: {e}", patient.id)))?;
            let gray = crate::mask::encode_label_mask(&label).map_err(CliError::input)?;
            let path = root
                .join(&patient.id)
                .join(format!("mask_{}.png", record.condition_key()));
            fsio::write_png_gray(&path, &gray)
                .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            written += 1;
        }
    }
    resolved.write_record(&root)?;
    println!("patients={} masks={written}", patients.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for weights and epoch logs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total folds in the cross-validation split.
    #[arg(long)]
    folds: Option<usize>,
    /// Train a single named fold instead of all of them.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable training-time augmentation.
    #[arg(long)]
    no_augment: bool,
    /// Pixel reduction of the cross-entropy part: sum or mean.
    #[arg(long)]
    loss_reduction: Option<String>,
}

/// Samples of one fold: training images from the other folds, validation
/// images from the fold itself.
fn fold_samples(
    patients: &[data::PatientRecord],
    assignment: &data::FoldAssignment,
    fold: usize,
) -> Result<(Vec<TrainSample>, Vec<TrainSample>), CliError> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for patient in patients {
        let Some(patient_fold) = assignment.fold_of(&patient.id) else {
            return Err(CliError::Input(format!(
                "patient {} is missing from the fold assignment",
                patient.id
            )));
        };
        for record in &patient.images {
            let Some(label) = record.label.clone() else {
                return Err(CliError::Input(format!(
                    "patient {}: mask_{}.png is missing; run gen-masks first",
                    patient.id,
                    record.condition_key()
                )));
            };
            let sample = TrainSample {
                id: format!("{}/{}", patient.id, record.condition_key()),
                image: record.image.clone(),
                target: label,
            };
            if patient_fold == fold {
                val.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    Ok((train, val))
}

fn selected_folds(fold: Option<usize>, folds: usize) -> Result<Vec<usize>, CliError> {
    match fold {
        Some(f) if f >= folds => Err(CliError::Input(format!(
            "fold {f} out of range for a {folds}-fold split"
        ))),
        Some(f) => Ok(vec![f]),
        None => Ok((0..folds).collect()),
    }
}

fn cmd_train(args: TrainArgs, file: &FileConfig) -> Result<(), CliError> {
    let root = args
        .data
        .or_else(|| file.data.clone())
        .ok_or_else(|| CliError::Input("train needs --data".into()))?;
    let out = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("train needs --out".into()))?;
    let folds = args.folds.or(file.folds).unwrap_or(4);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let reduction_name = args
        .loss_reduction
        .or_else(|| file.loss_reduction.clone())
        .unwrap_or_else(|| "sum".to_string());
    let augment = !args.no_augment && file.augment.unwrap_or(true);
    let cfg = TrainConfig {
        epochs: args.epochs.or(file.epochs).unwrap_or(50),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(5),
        initial_lr: args.lr.or(file.lr).unwrap_or(1e-4),
        seed,
        augment,
        loss: LossConfig {
            epsilon: 1e-6,
            hcel_reduction: parse_reduction(&reduction_name)?,
        },
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let run_folds = selected_folds(args.fold.or(file.fold), folds)?;

    let mut resolved = ResolvedConfig::new("train");
    resolved.push("data", root.display());
    resolved.push("out", out.display());
    resolved.push("folds", folds);
    if let [single] = run_folds[..] {
        resolved.push("fold", single);
    }
    resolved.push("epochs", cfg.epochs);
    resolved.push("batch_size", cfg.batch_size);
    resolved.push("lr", cfg.initial_lr);
    resolved.push("seed", seed);
    resolved.push("augment", cfg.augment);
    resolved.push("loss_reduction", reduction_name);
    resolved.print();

    let patients = data::load_dataset(&root)?;
    let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();
    let assignment = data::kfold_split(&ids, folds, seed)?;
    let h = ClassHierarchy::occlusal();

    ensure_dir(&out)?;
    resolved.write_record(&out)?;
    for fold in run_folds {
        let (train_set, val_set) = fold_samples(&patients, &assignment, fold)?;
        let mut net = DualBranchNet::new(h.num_leaves(), mix_seed(seed, fold as u64, 0x4E4554));
        let fold_cfg = TrainConfig {
            seed: mix_seed(seed, fold as u64, 0x545247),
            ..cfg.clone()
        };
        let report = model::train(&mut net, &train_set, &val_set, &h, &fold_cfg)?;

        let weights_path = out.join(format!("fold_{fold}.weights"));
        net.save_weights(&weights_path)?;
        let log_path = out.join(format!("fold_{fold}_log.txt"));
        fsio::write_atomic(&log_path, report.log_text().as_bytes())
            .map_err(|e| CliError::Input(format!("{}: {e}", log_path.display())))?;
        println!(
            "fold={fold} train_images={} val_images={} best_epoch={} best_dice={}",
            train_set.len(),
            val_set.len(),
            report.best_epoch,
            report.best_monitor
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory holding `fold_<i>.weights` files from `train`.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Total folds of the split the weights were trained with.
    #[arg(long)]
    folds: Option<usize>,
    /// Evaluate a single fold.
    #[arg(long)]
    fold: Option<usize>,
    /// Seed of the fold split used by `train`.
    #[arg(long)]
    seed: Option<u64>,
}

fn cmd_eval(args: EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let root = args
        .data
        .or_else(|| file.data.clone())
        .ok_or_else(|| CliError::Input("eval needs --data".into()))?;
    let weights_dir = args
        .weights
        .or_else(|| file.weights.clone())
        .ok_or_else(|| CliError::Input("eval needs --weights".into()))?;
    let out = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("eval needs --out".into()))?;
    let folds = args.folds.or(file.folds).unwrap_or(4);
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let run_folds = selected_folds(args.fold.or(file.fold), folds)?;

    let mut resolved = ResolvedConfig::new("eval");
    resolved.push("data", root.display());
    resolved.push("weights", weights_dir.display());
    resolved.push("out", out.display());
    resolved.push("folds", folds);
    if let [single] = run_folds[..] {
        resolved.push("fold", single);
    }
    resolved.push("seed", seed);
    resolved.print();

    let patients = data::load_dataset(&root)?;
    let ids: Vec<String> = patients.iter().map(|p| p.id.clone()).collect();
    let assignment = data::kfold_split(&ids, folds, seed)?;

    let mut rows: Vec<ImageMetrics> = Vec::new();
    for (dense, &fold) in run_folds.iter().enumerate() {
        let weights_path = weights_dir.join(format!("fold_{fold}.weights"));
        if !weights_path.is_file() {
            return Err(CliError::Input(format!(
                "missing weights for fold {fold}: {}",
                weights_path.display()
            )));
        }
        let net = DualBranchNet::load_weights(&weights_path)?;
        let (_, val_set) = fold_samples(&patients, &assignment, fold)?;
        for sample in &val_set {
            let pred = net.predict(&model::image_to_field(&sample.image))?;
            push_image_rows(&mut rows, &sample.id, dense, &pred, &sample.target)?;
        }
    }

    let report = aggregate_folds(rows, run_folds.len())?;
    write_report(&out, &report)?;
    resolved.write_record(&out)?;
    print_report_summary(&report);
    Ok(())
}

fn push_image_rows(
    rows: &mut Vec<ImageMetrics>,
    image_id: &str,
    fold: usize,
    pred: &LabelMask,
    target: &LabelMask,
) -> Result<(), CliError> {
    for class in EvalClass::ALL {
        let counts = match class {
            EvalClass::Mtp => metrics::confusion(pred, target, 1)?,
            EvalClass::Mfp => metrics::confusion(pred, target, 2)?,
            EvalClass::Full => full_contact_metrics(pred, target)?,
        };
        rows.push(ImageMetrics {
            image: image_id.to_string(),
            fold,
            class,
            counts,
        });
    }
    Ok(())
}

fn write_report(out: &Path, report: &MetricsReport) -> Result<(), CliError> {
    ensure_dir(out)?;
    let table_path = out.join("report.txt");
    fsio::write_atomic(&table_path, report.render_table().as_bytes())
        .map_err(|e| CliError::Input(format!("{}: {e}", table_path.display())))?;
    let csv_path = out.join("per_image.csv");
    fsio::write_atomic(&csv_path, metrics::per_image_csv(&report.rows).as_bytes())
        .map_err(|e| CliError::Input(format!("{}: {e}", csv_path.display())))?;
    Ok(())
}

fn print_report_summary(report: &MetricsReport) {
    for class_agg in &report.classes {
        for (idx, metric) in metrics::Metric::ALL.into_iter().enumerate() {
            let agg = class_agg.aggregates[idx];
            match (agg.mean, agg.mean_std) {
                (Some(mean), Some(std)) => println!(
                    "metric.{}.{}={} metric.{}.{}.std={}",
                    class_agg.class,
                    metric,
                    mean,
                    class_agg.class,
                    metric,
                    std
                ),
                _ => println!("metric.{}.{}=undefined", class_agg.class, metric),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// compare

#[derive(Debug, Args)]
struct CompareArgs {
    /// Directory with one subdirectory of FULL-contact masks per annotator.
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Directory of reference FULL-contact masks (matching filenames).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Optional CSV `annotator,image,seconds` with per-image times.
    #[arg(long)]
    timing: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct ObserverRow {
    annotator: String,
    image: String,
    tp: u64,
    fp: u64,
    #[serde(rename = "fn")]
    fn_: u64,
    tn: u64,
    iou: Option<f64>,
    dice: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
}

fn list_mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let mut files = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry
            .map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))?
            .path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .expect("png path has a file name")
                .to_string();
            files.insert(name, path);
        }
    }
    Ok(files)
}

fn load_full_mask(path: &Path) -> Result<BinaryMask, CliError> {
    let gray = fsio::read_png_gray(path)
        .map_err(|reason| CliError::Input(format!("{}: {reason}", path.display())))?;
    // Accept either binary {0,255} masks or multiclass masks; FULL is
    // anything that is not background.
    let label = decode_label_mask(&gray)
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(label.class_mask(1).union(&label.class_mask(2)).map_err(CliError::input)?)
}

fn mean_and_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    };
    Some((mean, std))
}

fn cmd_compare(args: CompareArgs, file: &FileConfig) -> Result<(), CliError> {
    let annotations = args
        .annotations
        .or_else(|| file.annotations.clone())
        .ok_or_else(|| CliError::Input("compare needs --annotations".into()))?;
    let reference = args
        .reference
        .or_else(|| file.reference.clone())
        .ok_or_else(|| CliError::Input("compare needs --reference".into()))?;
    let timing = args.timing.or_else(|| file.timing.clone());
    let out = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("compare needs --out".into()))?;

    let mut resolved = ResolvedConfig::new("compare");
    resolved.push("annotations", annotations.display());
    resolved.push("reference", reference.display());
    if let Some(t) = &timing {
        resolved.push("timing", t.display());
    }
    resolved.push("out", out.display());
    resolved.print();

    let reference_files = list_mask_files(&reference)?;
    if reference_files.is_empty() {
        return Err(CliError::Input(format!(
            "no reference masks in {}",
            reference.display()
        )));
    }

    // Per-annotator mean time per image, when a timing file is given.
    let mut times: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    if let Some(path) = &timing {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        for record in reader.deserialize::<(String, String, f64)>() {
            let (annotator, _image, seconds) =
                record.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
            times.entry(annotator).or_default().push(seconds);
        }
    }

    let mut annotator_dirs: Vec<PathBuf> = std::fs::read_dir(&annotations)
        .map_err(|e| CliError::Input(format!("{}: {e}", annotations.display())))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    annotator_dirs.sort();
    if annotator_dirs.is_empty() {
        return Err(CliError::Input(format!(
            "no annotator directories in {}",
            annotations.display()
        )));
    }

    let mut table = String::new();
    writeln!(
        table,
        "{:<12} {:>16} {:>16} {:>16} {:>16} {:>10}",
        "annotator", "IoU", "Dice", "Precision", "Recall", "time_s"
    )
    .unwrap();
    let mut csv_rows: Vec<ObserverRow> = Vec::new();

    for dir in &annotator_dirs {
        let annotator = dir
            .file_name()
            .and_then(|n| n.to_str())
            .expect("directory has a name")
            .to_string();
        let annotator_files = list_mask_files(dir)?;
        let missing: Vec<&String> = reference_files
            .keys()
            .filter(|name| !annotator_files.contains_key(*name))
            .collect();
        let extra: Vec<&String> = annotator_files
            .keys()
            .filter(|name| !reference_files.contains_key(*name))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(CliError::Input(format!(
                "annotator {annotator}: unmatched filenames (missing: {missing:?}, extra: {extra:?})"
            )));
        }

        let mut per_metric: [Vec<f64>; 4] = Default::default();
        for (name, ref_path) in &reference_files {
            let target = load_full_mask(ref_path)?;
            let pred = load_full_mask(&annotator_files[name])?;
            let counts: ConfusionCounts = confusion_binary(&pred, &target)
                .map_err(|e| CliError::Input(format!("{annotator}/{name}: {e}")))?;
            for (idx, metric) in metrics::Metric::ALL.into_iter().enumerate() {
                if let Some(v) = counts.metric(metric) {
                    per_metric[idx].push(v);
                }
            }
            csv_rows.push(ObserverRow {
                annotator: annotator.clone(),
                image: name.clone(),
                tp: counts.tp,
                fp: counts.fp,
                fn_: counts.fn_,
                tn: counts.tn,
                iou: counts.iou(),
                dice: counts.dice(),
                precision: counts.precision(),
                recall: counts.recall(),
            });
        }

        let cell = |values: &[f64]| match mean_and_std(values) {
            Some((mean, std)) => format!("{mean:.3} (\u{b1}{std:.3})"),
            None => "undefined".to_string(),
        };
        let time_cell = match times.get(&annotator) {
            Some(seconds) if !seconds.is_empty() => {
                format!("{:.1}", seconds.iter().sum::<f64>() / seconds.len() as f64)
            }
            _ => "-".to_string(),
        };
        writeln!(
            table,
            "{:<12} {:>16} {:>16} {:>16} {:>16} {:>10}",
            annotator,
            cell(&per_metric[0]),
            cell(&per_metric[1]),
            cell(&per_metric[2]),
            cell(&per_metric[3]),
            time_cell
        )
        .unwrap();
    }

    ensure_dir(&out)?;
    let table_path = out.join("observer_report.txt");
    fsio::write_atomic(&table_path, table.as_bytes())
        .map_err(|e| CliError::Input(format!("{}: {e}", table_path.display())))?;
    let mut writer = csv::Writer::from_writer(Vec::new());
    for row in &csv_rows {
        writer.serialize(row).map_err(CliError::input)?;
    }
    let csv_bytes = writer.into_inner().map_err(CliError::input)?;
    let csv_path = out.join("observer_per_image.csv");
    fsio::write_atomic(&csv_path, &csv_bytes)
        .map_err(|e| CliError::Input(format!("{}: {e}", csv_path.display())))?;
    resolved.write_record(&out)?;
    println!(
        "annotators={} images={}",
        annotator_dirs.len(),
        reference_files.len()
    );
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------
// render

#[derive(Debug, Args)]
struct RenderArgs {
    /// Prediction mask file or directory.
    #[arg(long)]
    pred: Option<PathBuf>,
    /// Target mask file or directory with matching filenames.
    #[arg(long)]
    target: Option<PathBuf>,
    /// Optional base photograph file or directory to composite over.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Class to compare: mtp, mfp or full.
    #[arg(long)]
    class: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn class_binary(label: &LabelMask, class: &str) -> Result<BinaryMask, CliError> {
    match class {
        "mtp" => Ok(label.class_mask(1)),
        "mfp" => Ok(label.class_mask(2)),
        "full" => label
            .class_mask(1)
            .union(&label.class_mask(2))
            .map_err(CliError::input),
        other => Err(CliError::Input(format!(
            "unknown class '{other}' (expected mtp, mfp or full)"
        ))),
    }
}

fn cmd_render(args: RenderArgs, file: &FileConfig) -> Result<(), CliError> {
    let pred = args
        .pred
        .or_else(|| file.pred.clone())
        .ok_or_else(|| CliError::Input("render needs --pred".into()))?;
    let target = args
        .target
        .or_else(|| file.target.clone())
        .ok_or_else(|| CliError::Input("render needs --target".into()))?;
    let image = args.image.or_else(|| file.image.clone());
    let class = args
        .class
        .or_else(|| file.class.clone())
        .unwrap_or_else(|| "full".to_string());
    let out = args
        .out
        .or_else(|| file.out.clone())
        .ok_or_else(|| CliError::Input("render needs --out".into()))?;

    let mut resolved = ResolvedConfig::new("render");
    resolved.push("pred", pred.display());
    resolved.push("target", target.display());
    if let Some(img) = &image {
        resolved.push("image", img.display());
    }
    resolved.push("class", &class);
    resolved.push("out", out.display());
    resolved.print();

    let pairs: Vec<(String, PathBuf, PathBuf)> = if pred.is_dir() {
        let pred_files = list_mask_files(&pred)?;
        let target_files = list_mask_files(&target)?;
        let missing: Vec<&String> = pred_files
            .keys()
            .filter(|n| !target_files.contains_key(*n))
            .chain(target_files.keys().filter(|n| !pred_files.contains_key(*n)))
            .collect();
        if !missing.is_empty() {
            return Err(CliError::Input(format!("unmatched filenames: {missing:?}")));
        }
        pred_files
            .into_iter()
            .map(|(name, p)| {
                let t = target_files[&name].clone();
                (name, p, t)
            })
            .collect()
    } else {
        let name = pred
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| CliError::Input(format!("{} has no file name", pred.display())))?
            .to_string();
        vec![(name, pred.clone(), target.clone())]
    };

    ensure_dir(&out)?;
    let mut rendered = 0usize;
    for (name, pred_path, target_path) in &pairs {
        let pred_gray = fsio::read_png_gray(pred_path)
            .map_err(|reason| CliError::Input(format!("{}: {reason}", pred_path.display())))?;
        let target_gray = fsio::read_png_gray(target_path)
            .map_err(|reason| CliError::Input(format!("{}: {reason}", target_path.display())))?;
        let pred_label = decode_label_mask(&pred_gray)
            .map_err(|e| CliError::Input(format!("{}: {e}", pred_path.display())))?;
        let target_label = decode_label_mask(&target_gray)
            .map_err(|e| CliError::Input(format!("{}: {e}", target_path.display())))?;
        let pred_bin = class_binary(&pred_label, &class)?;
        let target_bin = class_binary(&target_label, &class)?;

        let base = match &image {
            None => None,
            Some(path) if path.is_dir() => {
                let img_path = path.join(name);
                if !img_path.is_file() {
                    return Err(CliError::Input(format!(
                        "missing base image {}",
                        img_path.display()
                    )));
                }
                Some(fsio::read_png_rgb(&img_path).map_err(|reason| {
                    CliError::Input(format!("{}: {reason}", img_path.display()))
                })?)
            }
            Some(path) => Some(
                fsio::read_png_rgb(path)
                    .map_err(|reason| CliError::Input(format!("{}: {reason}", path.display())))?,
            ),
        };

        let overlay =
            render_overlay(&pred_bin, &target_bin, base.as_ref()).map_err(CliError::input)?;
        let out_path = out.join(format!("overlay_{name}"));
        fsio::write_png_rgb(&out_path, &overlay)
            .map_err(|e| CliError::Input(format!("{}: {e}", out_path.display())))?;
        rendered += 1;
    }
    resolved.write_record(&out)?;
    println!("overlays={rendered}");
    Ok(())
}

// ---------------------------------------------------------------------------
// dispatch

/// Run the CLI from explicit arguments; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are successful exits.
            let code = if err.use_stderr() { 2 } else { 0 };
            let _ = err.print();
            return code;
        }
    };
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(file) => file,
        Err(err) => {
            eprintln!("error: {err}");
            return err.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args, &file),
        Command::GenMasks(args) => cmd_gen_masks(args, &file),
        Command::Train(args) => cmd_train(args, &file),
        Command::Eval(args) => cmd_eval(args, &file),
        Command::Compare(args) => cmd_compare(args, &file),
        Command::Render(args) => cmd_render(args, &file),
    };
    match result {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

/// Entry point for the `occuseg` binary.
pub fn main() -> i32 {
    run_from(std::env::args_os())
}
