//! The five CLI commands as library calls.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ResolvedConfig;
use super::report::{evaluate, EvaluationReport, InputSide};
use crate::checkpoint::{load_checkpoint, read_checkpoint_header, save_checkpoint};
use crate::data::generate::GenerationFailure;
use crate::data::{
    compute_normalization, default_lr_root, generate_lr_dataset, scan_source, write_synthetic_source, DatasetManifest,
    LoaderOptions, PairedDataset, Split,
};
use crate::distill::{
    train_student, train_supervised, train_teacher, EpochSummary, LossBreakdown, Phase, StepRecord, TrainObserver,
    TrainOptions,
};
use crate::error::{Error, Result};
use crate::network::{Ablation, Network, NetworkConfig};
use crate::tensor::Scalar;

pub const ABLATION_ROWS: [&str; 6] = [
    "Baseline(Resnet-50)",
    "Baseline+CBAM",
    "Baseline+DBAM",
    "Baseline+Global Module",
    "Baseline+DBAM+GM(without kd)",
    "Baseline+DBAM+GM(GME-Net)",
];

/// Architecture toggles and whether distillation is used, per ablation row.
pub fn ablation_row(index: usize) -> (Ablation, bool) {
    let a = |use_dbam, use_cbam, use_global_branch| Ablation {
        use_dbam,
        use_cbam,
        use_global_branch,
    };
    match index {
        0 => (a(false, false, false), false),
        1 => (a(false, true, false), false),
        2 => (a(true, false, false), false),
        3 => (a(false, false, true), false),
        4 => (a(true, false, true), false),
        _ => (a(true, false, true), true),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct PrepareOutcome {
    pub manifest_path: PathBuf,
    pub manifest: DatasetManifest,
    pub failures: Vec<GenerationFailure>,
}

/// Optionally writes the synthetic source, scans it, computes normalisation
/// statistics, fabricates the low-resolution copy and writes the manifest.
pub fn cmd_prepare_data(rc: &ResolvedConfig) -> Result<PrepareOutcome> {
    let cfg = &rc.config;
    let src = &cfg.data.source_dir;
    if let Some(s) = &cfg.data.synthetic {
        let n = write_synthetic_source(src, s.per_class, s.size, cfg.seed)?;
        log::info!("wrote {n} synthetic images to {}", src.display());
    }
    let mut manifest = scan_source(src, cfg.data.test_fraction, cfg.seed)?;
    manifest.header.normalization = Some(compute_normalization(&manifest)?);
    let lr_dir = cfg
        .data
        .lr_dir
        .clone()
        .unwrap_or_else(|| default_lr_root(src, cfg.data.degradation.target_size));
    let report = generate_lr_dataset(&manifest, &cfg.data.degradation, &lr_dir)?;
    let mut out = report.manifest;
    out.header.provenance = Some(rc.provenance.to_value());
    let manifest_path = cfg.manifest_path();
    out.write(&manifest_path)?;
    if !report.failures.is_empty() {
        write_json(&manifest_path.with_extension("errors.json"), &report.failures)?;
    }
    log::info!(
        "{} records ({} failures) -> {}",
        out.records.len(),
        report.failures.len(),
        manifest_path.display()
    );
    Ok(PrepareOutcome {
        manifest_path,
        manifest: out,
        failures: report.failures,
    })
}

struct Splits<T> {
    train: PairedDataset<T>,
    test: PairedDataset<T>,
}

fn load_splits<T: Scalar>(rc: &ResolvedConfig) -> Result<Splits<T>> {
    let cfg = &rc.config;
    let manifest = DatasetManifest::read(&cfg.manifest_path())?;
    if manifest.num_classes() != cfg.network.num_classes {
        return Err(Error::Dataset(format!(
            "manifest has {} classes, network.num_classes is {}",
            manifest.num_classes(),
            cfg.network.num_classes
        )));
    }
    let opts = LoaderOptions {
        input_size: cfg.input_size(),
        missing: cfg.data.missing,
    };
    Ok(Splits {
        train: PairedDataset::load(&manifest, Split::Train, &opts)?,
        test: PairedDataset::load(&manifest, Split::Test, &opts)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochEvaluation {
    pub epoch: usize,
    pub accuracy: f64,
}

/// Written to `summary.json` in the run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub phase: Phase,
    pub parameter_count: usize,
    pub epochs: Vec<EpochSummary>,
    pub evaluations: Vec<EpochEvaluation>,
    pub best_epoch: Option<usize>,
    pub best_accuracy: Option<f64>,
    pub final_report: EvaluationReport,
    pub first_step: Option<LossBreakdown>,
    pub last_step: Option<LossBreakdown>,
    pub run_dir: PathBuf,
}

struct RunObserver<'a, T> {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    epochs_log: BufWriter<File>,
    test: &'a PairedDataset<T>,
    side: InputSide,
    every: usize,
    total_epochs: usize,
    batch_size: usize,
    dir: PathBuf,
    provenance: serde_json::Value,
    best: Option<(usize, f64)>,
    evaluations: Vec<EpochEvaluation>,
    last_report: Option<EvaluationReport>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

impl<T: Scalar> TrainObserver<T> for RunObserver<'_, T> {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.metrics, "{line}").map_err(|e| Error::io(&self.metrics_path, e))
    }

    fn on_epoch(&mut self, summary: &EpochSummary, network: &Network<T>) -> Result<()> {
        let path = self.dir.join("epochs.ndjson");
        writeln!(self.epochs_log, "{}", serde_json::to_string(summary)?).map_err(|e| Error::io(&path, e))?;
        self.epochs_log.flush().map_err(|e| Error::io(&path, e))?;
        self.metrics.flush().map_err(|e| Error::io(&self.metrics_path, e))?;
        let last = summary.epoch + 1 == self.total_epochs;
        let mut metrics = serde_json::json!({ "epoch_summary": summary });
        if last || (summary.epoch + 1) % self.every == 0 {
            let report = evaluate(network, self.test, self.side, self.batch_size)?;
            let acc = report.overall_accuracy;
            log::info!("epoch {}: test accuracy {acc:.2}%", summary.epoch);
            metrics["test_accuracy"] = acc.into();
            self.evaluations.push(EpochEvaluation {
                epoch: summary.epoch,
                accuracy: acc,
            });
            if self.best.is_none_or(|(_, b)| acc > b) {
                self.best = Some((summary.epoch, acc));
                save_checkpoint(
                    &self.dir.join("best.ckpt"),
                    network,
                    summary.epoch,
                    metrics.clone(),
                    self.provenance.clone(),
                )?;
            }
            self.last_report = Some(report);
        }
        save_checkpoint(&self.dir.join("last.ckpt"), network, summary.epoch, metrics, self.provenance.clone())
    }
}

fn train_run<T: Scalar>(
    rc: &ResolvedConfig,
    phase: Phase,
    network: &mut Network<T>,
    teacher: Option<&Network<T>>,
    data: &Splits<T>,
    lambda_kd: f64,
    dir: &Path,
) -> Result<RunSummary> {
    let cfg = &rc.config;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let side = match phase {
        Phase::Teacher => InputSide::Hr,
        _ => InputSide::Lr,
    };
    let metrics_path = dir.join("metrics.ndjson");
    let mut obs = RunObserver {
        metrics: create(&metrics_path)?,
        metrics_path,
        epochs_log: create(&dir.join("epochs.ndjson"))?,
        test: &data.test,
        side,
        every: cfg.eval.every,
        total_epochs: cfg.schedule.epochs,
        batch_size: cfg.eval.batch_size,
        dir: dir.to_path_buf(),
        provenance: rc.provenance.to_value(),
        best: None,
        evaluations: Vec::new(),
        last_report: None,
    };
    let options = TrainOptions {
        schedule: cfg.schedule.clone(),
        lambda_kd,
        seed: cfg.seed,
    };
    let outcome = match (phase, teacher) {
        (Phase::Teacher, _) => train_teacher(network, &data.train, &options, &mut obs)?,
        (Phase::Student, Some(t)) => train_student(network, t, &data.train, &options, &mut obs)?,
        (Phase::Student, None) => return Err(Error::Internal("distillation without a teacher".into())),
        (Phase::Supervised, _) => train_supervised(network, &data.train, &options, &mut obs)?,
    };
    let mut final_report = match obs.last_report.take() {
        Some(r) => r,
        None => evaluate(network, &data.test, side, cfg.eval.batch_size)?,
    };
    final_report.provenance = rc.provenance.to_value();
    let summary = RunSummary {
        phase,
        parameter_count: network.count_parameters(),
        epochs: outcome.epochs,
        evaluations: obs.evaluations,
        best_epoch: obs.best.map(|b| b.0),
        best_accuracy: obs.best.map(|b| b.1),
        final_report,
        first_step: outcome.steps.first().cloned(),
        last_step: outcome.steps.last().cloned(),
        run_dir: dir.to_path_buf(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Trains the teacher on high-resolution inputs; output under `<output_dir>/teacher`.
pub fn cmd_train_teacher<T: Scalar>(rc: &ResolvedConfig) -> Result<RunSummary> {
    let data = load_splits::<T>(rc)?;
    let mut net = Network::<T>::new(&rc.config.network, rc.config.seed)?;
    let dir = rc.config.output_dir.join("teacher");
    train_run(rc, Phase::Teacher, &mut net, None, &data, 0.0, &dir)
}

/// Leaf-level differences between two network configurations.
pub fn config_diff(a: &NetworkConfig, b: &NetworkConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                for (k, va) in x {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, va, y.get(k).unwrap_or(&serde_json::Value::Null), out);
                }
            }
            _ if a != b => out.push(format!("{prefix}: {a} != {b}")),
            _ => {}
        }
    }
    let mut out = Vec::new();
    let (a, b) = (serde_json::to_value(a).expect("config"), serde_json::to_value(b).expect("config"));
    walk("", &a, &b, &mut out);
    out
}

/// Distils a frozen teacher checkpoint into a fresh student; output under `<output_dir>/student`.
pub fn cmd_distill_student<T: Scalar>(rc: &ResolvedConfig, teacher_checkpoint: &Path) -> Result<RunSummary> {
    let header = read_checkpoint_header(teacher_checkpoint)?;
    let diff = config_diff(&header.network, &rc.config.network);
    if !diff.is_empty() {
        return Err(Error::Config(format!(
            "teacher checkpoint architecture differs from the configured network (checkpoint != config):\n  {}",
            diff.join("\n  ")
        )));
    }
    let (teacher, _) = load_checkpoint::<T>(teacher_checkpoint)?;
    let data = load_splits::<T>(rc)?;
    let mut student = Network::<T>::new(&rc.config.network, rc.config.seed)?;
    let dir = rc.config.output_dir.join("student");
    train_run(
        rc,
        Phase::Student,
        &mut student,
        Some(&teacher),
        &data,
        rc.config.distill.lambda_kd,
        &dir,
    )
}

/// Evaluates a checkpoint on the manifest's test split and writes
/// `<output_dir>/evaluation.json`.
pub fn cmd_evaluate<T: Scalar>(rc: &ResolvedConfig, checkpoint: &Path, side: InputSide) -> Result<EvaluationReport> {
    let (net, header) = load_checkpoint::<T>(checkpoint)?;
    let cfg = &rc.config;
    let manifest = DatasetManifest::read(&cfg.manifest_path())?;
    if manifest.num_classes() != header.network.num_classes {
        return Err(Error::Dataset(format!(
            "checkpoint predicts {} classes, manifest lists {}",
            header.network.num_classes,
            manifest.num_classes()
        )));
    }
    let opts = LoaderOptions {
        input_size: (header.network.input_size[0], header.network.input_size[1]),
        missing: cfg.data.missing,
    };
    let test = PairedDataset::<T>::load(&manifest, Split::Test, &opts)?;
    let mut report = evaluate(&net, &test, side, cfg.eval.batch_size)?;
    report.provenance = serde_json::json!({
        "checkpoint": checkpoint,
        "checkpoint_epoch": header.epoch,
        "checkpoint_provenance": header.provenance,
        "evaluation": rc.provenance.to_value(),
    });
    write_json(&cfg.output_dir.join("evaluation.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ablation: Ablation,
    pub distilled: bool,
    pub parameter_count: usize,
    pub multiply_accumulates: u64,
    /// Low-resolution test accuracy (percent) at the last epoch.
    pub accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub teacher_accuracy: Option<f64>,
    /// Distillation loss at the first student step and averaged over the last epoch.
    pub initial_l_kd: Option<f64>,
    pub final_l_kd: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub schema_version: u32,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
    pub provenance: serde_json::Value,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method | Params | MACs | LR accuracy (%) |\n|---|---:|---:|---:|\n");
        for r in &self.rows {
            let acc = match (&r.accuracy, &r.error) {
                (Some(a), _) => format!("{a:.4}"),
                (None, Some(e)) => format!("failed: {e}"),
                _ => "-".into(),
            };
            s.push_str(&format!(
                "| {} | {} | {} | {acc} |\n",
                r.label, r.parameter_count, r.multiply_accumulates
            ));
        }
        s
    }
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn ablation_entry<T: Scalar>(
    rc: &ResolvedConfig,
    data: &Splits<T>,
    index: usize,
    dir: &Path,
    row: &mut AblationRow,
) -> Result<()> {
    let mut sub = rc.clone();
    sub.config.network.ablation = row.ablation;
    sub.provenance.config = sub.config.clone();
    let cfg = &sub.config;
    let mut net = Network::<T>::new(&cfg.network, cfg.seed)?;
    row.parameter_count = net.count_parameters();
    row.multiply_accumulates = net.count_multiply_accumulates(cfg.network.input_size);
    let summary = if row.distilled {
        let mut teacher = Network::<T>::new(&cfg.network, cfg.seed)?;
        let t = train_run(&sub, Phase::Teacher, &mut teacher, None, data, 0.0, &dir.join("teacher"))?;
        row.teacher_accuracy = Some(t.final_report.overall_accuracy);
        let s = train_run(
            &sub,
            Phase::Student,
            &mut net,
            Some(&teacher),
            data,
            cfg.distill.lambda_kd,
            &dir.join("student"),
        )?;
        row.initial_l_kd = s.first_step.as_ref().map(|l| l.l_kd);
        row.final_l_kd = s.epochs.last().map(|e| e.mean_l_kd);
        s
    } else {
        train_run(&sub, Phase::Supervised, &mut net, None, data, 0.0, dir)?
    };
    log::info!("ablation row {index} ({}) done", row.label);
    row.accuracy = Some(summary.final_report.overall_accuracy);
    row.best_accuracy = summary.best_accuracy;
    Ok(())
}

/// Runs the six ablation rows sequentially with a shared seed. A failing row
/// is recorded and the remaining rows still run. Writes `ablation/table.json`
/// and `ablation/table.md`.
pub fn cmd_ablation<T: Scalar>(rc: &ResolvedConfig) -> Result<AblationTable> {
    let data = load_splits::<T>(rc)?;
    let root = rc.config.output_dir.join("ablation");
    let mut rows = Vec::with_capacity(ABLATION_ROWS.len());
    for (i, label) in ABLATION_ROWS.iter().enumerate() {
        let (ablation, distilled) = ablation_row(i);
        let mut row = AblationRow {
            label: label.to_string(),
            ablation,
            distilled,
            parameter_count: 0,
            multiply_accumulates: 0,
            accuracy: None,
            best_accuracy: None,
            teacher_accuracy: None,
            initial_l_kd: None,
            final_l_kd: None,
            error: None,
        };
        let dir = root.join(format!("{i}_{}", slug(label)));
        if let Err(e) = ablation_entry(rc, &data, i, &dir, &mut row) {
            log::error!("ablation row {label:?} failed: {e}");
            row.error = Some(e.to_string());
        }
        rows.push(row);
    }
    let table = AblationTable {
        schema_version: 1,
        seed: rc.config.seed,
        rows,
        provenance: rc.provenance.to_value(),
    };
    write_json(&root.join("table.json"), &table)?;
    std::fs::write(root.join("table.md"), table.to_markdown()).map_err(|e| Error::io(root.join("table.md"), e))?;
    Ok(table)
}
