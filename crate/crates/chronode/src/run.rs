//! Experiment pipelines: data generation, pre-training, fine-tuning,
//! evaluation, the ablation grid, and result reporting. Each run owns an
//! output directory holding a config snapshot, checkpoint, loss curve,
//! stability report, metrics, and a run record. `(config, seed)` determines
//! every artifact byte for byte in 64-bit mode.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_into_bundle, save_bundle};
use crate::cohort::{build_pairs, generate_cohort, load_cohort, save_cohort, task_splits, Trajectory};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{render_table_json, render_table_text, TableRow, TaskMetrics};
use crate::ssl::{self, DeltaMode, Scheme};
use crate::train::{
    self, evaluate, finetune, scratch_bundle, write_curve, StabilityReport,
};

pub const CHECKPOINT_NAME: &str = "checkpoint";

/// Persisted description of one completed (or diverged) run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: String,
    pub config_hash: String,
    pub method: String,
    pub weights: String,
    pub task: String,
    pub checkpoint_dir: Option<PathBuf>,
    pub curve_path: Option<PathBuf>,
    pub metrics: Option<TaskMetrics>,
    pub stability: StabilityReport,
    pub divergence_cause: Option<String>,
}

impl RunRecord {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("run_record.json")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::write(Self::path(dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<RunRecord> {
        let text = std::fs::read_to_string(Self::path(dir))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn prepare_out_dir(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.json"), cfg.to_json()?)?;
    Ok(())
}

fn write_stability(dir: &Path, stability: &StabilityReport) -> Result<()> {
    std::fs::write(
        dir.join("stability.json"),
        serde_json::to_string_pretty(stability)?,
    )?;
    Ok(())
}

fn write_metrics(dir: &Path, metrics: &TaskMetrics) -> Result<()> {
    std::fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(metrics)?,
    )?;
    Ok(())
}

fn cohort_for(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<Trajectory>> {
    match data {
        Some(path) => load_cohort(path),
        None => generate_cohort(&cfg.cohort, cfg.seed),
    }
}

/// Generate a cohort and write it as line-delimited JSON.
pub fn run_gen_data(cfg: &ExperimentConfig, out_path: &Path) -> Result<usize> {
    cfg.validate()?;
    let cohort = generate_cohort(&cfg.cohort, cfg.seed)?;
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    save_cohort(out_path, &cohort)?;
    Ok(cohort.len())
}

/// Pre-train on the configured scheme. All artifacts are written even when
/// the run diverges; divergence is then surfaced as an error so the CLI can
/// exit with the dedicated code.
pub fn run_pretrain(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    out_dir: &Path,
) -> Result<RunRecord> {
    cfg.validate()?;
    prepare_out_dir(cfg, out_dir)?;
    let cohort = cohort_for(cfg, data)?;
    let pairs = build_pairs(&cohort);
    let outcome = ssl::pretrain(&pairs, cfg)?;

    let curve_path = out_dir.join("curve.csv");
    write_curve(&curve_path, &outcome.curve)?;
    write_stability(out_dir, &outcome.stability)?;
    save_bundle(out_dir, CHECKPOINT_NAME, &outcome.bundle, cfg.precision)?;

    let record = RunRecord {
        kind: "pretrain".into(),
        config_hash: cfg.hash()?,
        method: cfg.head.label().into(),
        weights: cfg.scheme.label().into(),
        task: cfg.task.label(),
        checkpoint_dir: Some(out_dir.to_path_buf()),
        curve_path: Some(curve_path),
        metrics: None,
        stability: outcome.stability.clone(),
        divergence_cause: outcome.divergence_cause.clone(),
    };
    record.save(out_dir)?;

    if let Some(cause) = outcome.divergence_cause {
        let at = outcome.stability.divergence.expect("divergence step recorded");
        return Err(Error::Divergence {
            epoch: at.epoch,
            step: at.step,
            cause,
        });
    }
    Ok(record)
}

/// Fine-tune on the configured task, starting from a pre-trained checkpoint
/// or from scratch. The saved checkpoint is the best-validation snapshot and
/// the recorded metrics are its test-split scores.
pub fn run_finetune(
    cfg: &ExperimentConfig,
    pretrained: Option<&Path>,
    data: Option<&Path>,
    out_dir: &Path,
) -> Result<RunRecord> {
    cfg.validate()?;
    prepare_out_dir(cfg, out_dir)?;
    let cohort = cohort_for(cfg, data)?;
    let splits = task_splits(&cohort, cfg.task, cfg.horizon_tol_years, cfg.seed)?;

    // Scratch and pre-trained arms share identical init, data order, and
    // evaluation code; the pre-trained arm only overwrites the
    // encoder/projector/field values afterwards.
    let mut bundle = scratch_bundle(cfg.cohort.obs_dim, cfg.head, cfg)?;
    let weights_label = match pretrained {
        Some(ckpt_dir) => {
            load_into_bundle(ckpt_dir, CHECKPOINT_NAME, &mut bundle)?;
            match RunRecord::load(ckpt_dir) {
                Ok(rec) => rec.weights,
                Err(_) => "pretrained".to_string(),
            }
        }
        None => "scratch".to_string(),
    };

    let outcome = finetune(bundle, cfg.head, &splits, cfg)?;
    let curve_path = out_dir.join("curve.csv");
    write_curve(&curve_path, &outcome.curve)?;
    write_stability(out_dir, &outcome.stability)?;
    std::fs::write(
        out_dir.join("val_history.json"),
        serde_json::to_string_pretty(&outcome.val_history)?,
    )?;
    save_bundle(out_dir, CHECKPOINT_NAME, &outcome.best, cfg.precision)?;

    let metrics = if outcome.divergence_cause.is_none() {
        let m = evaluate(&outcome.best, cfg.head, &splits.test, cfg)?;
        write_metrics(out_dir, &m)?;
        Some(m)
    } else {
        None
    };

    let record = RunRecord {
        kind: "finetune".into(),
        config_hash: cfg.hash()?,
        method: cfg.head.label().into(),
        weights: weights_label,
        task: cfg.task.label(),
        checkpoint_dir: Some(out_dir.to_path_buf()),
        curve_path: Some(curve_path),
        metrics,
        stability: outcome.stability.clone(),
        divergence_cause: outcome.divergence_cause.clone(),
    };
    record.save(out_dir)?;

    if let Some(cause) = outcome.divergence_cause {
        let at = outcome.stability.divergence.expect("divergence step recorded");
        return Err(Error::Divergence {
            epoch: at.epoch,
            step: at.step,
            cause,
        });
    }
    Ok(record)
}

/// Evaluate a fine-tuned checkpoint on the test split of the configured task.
pub fn run_evaluate(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    data: Option<&Path>,
    out_dir: Option<&Path>,
) -> Result<TaskMetrics> {
    cfg.validate()?;
    let cohort = cohort_for(cfg, data)?;
    let splits = task_splits(&cohort, cfg.task, cfg.horizon_tol_years, cfg.seed)?;
    let mut bundle = scratch_bundle(cfg.cohort.obs_dim, cfg.head, cfg)?;
    load_into_bundle(checkpoint_dir, CHECKPOINT_NAME, &mut bundle)?;
    let metrics = evaluate(&bundle, cfg.head, &splits.test, cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_metrics(dir, &metrics)?;
    }
    Ok(metrics)
}

/// One arm of the ablation grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationArm {
    pub name: String,
    pub scheme: Scheme,
    pub delta_mode: DeltaMode,
    pub with_tc: bool,
}

/// The declared grid: the three interval policies for the contrastive
/// scheme, then the consistency term off/on for the BYOL scheme.
pub fn ablation_grid() -> Vec<AblationArm> {
    vec![
        AblationArm {
            name: "simclr_dpa(delta=fixed)".into(),
            scheme: Scheme::SimclrDpa,
            delta_mode: DeltaMode::Fixed,
            with_tc: true,
        },
        AblationArm {
            name: "simclr_dpa(delta=unaligned)".into(),
            scheme: Scheme::SimclrDpa,
            delta_mode: DeltaMode::Unaligned,
            with_tc: true,
        },
        AblationArm {
            name: "simclr_dpa(delta=aligned)".into(),
            scheme: Scheme::SimclrDpa,
            delta_mode: DeltaMode::Aligned,
            with_tc: true,
        },
        AblationArm {
            name: "byol_tetc(tc=no)".into(),
            scheme: Scheme::ByolTetc,
            delta_mode: DeltaMode::Aligned,
            with_tc: false,
        },
        AblationArm {
            name: "byol_tetc(tc=yes)".into(),
            scheme: Scheme::ByolTetc,
            delta_mode: DeltaMode::Aligned,
            with_tc: true,
        },
    ]
}

/// Run the five-arm ablation grid (pre-train, then fine-tune and evaluate
/// each arm on the base task). Arm failures are recorded as rows without
/// metrics and the grid continues.
pub fn run_ablate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<TableRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for arm in ablation_grid() {
        let mut arm_cfg = cfg.clone();
        arm_cfg.scheme = arm.scheme;
        arm_cfg.delta_mode = arm.delta_mode;
        arm_cfg.with_tc = arm.with_tc;
        let arm_dir = out_dir.join(arm.name.replace(['(', ')', '='], "_"));
        let pre_dir = arm_dir.join("pretrain");
        let ft_dir = arm_dir.join("finetune");

        let outcome = run_pretrain(&arm_cfg, None, &pre_dir)
            .and_then(|_| run_finetune(&arm_cfg, Some(&pre_dir), None, &ft_dir));
        match outcome {
            Ok(record) => rows.push(TableRow {
                method: arm_cfg.head.label().into(),
                weights: arm.name.clone(),
                task: arm_cfg.task.label(),
                kappa: record.metrics.as_ref().and_then(|m| m.kappa),
                auc1: record.metrics.as_ref().and_then(|m| m.auc1),
                auc2: record.metrics.as_ref().and_then(|m| m.auc2),
                auc3: record.metrics.as_ref().and_then(|m| m.auc3),
            }),
            Err(e) => {
                // Recorded as an empty row; the grid continues.
                eprintln!("ablation arm {} failed: {e}", arm.name);
                rows.push(TableRow {
                    method: arm_cfg.head.label().into(),
                    weights: arm.name.clone(),
                    task: arm_cfg.task.label(),
                    kappa: None,
                    auc1: None,
                    auc2: None,
                    auc3: None,
                });
            }
        }
    }
    std::fs::write(out_dir.join("ablation_table.txt"), render_table_text(&rows))?;
    std::fs::write(out_dir.join("ablation_table.json"), render_table_json(&rows)?)?;
    Ok(rows)
}

/// Aggregate run records from run directories into the result table.
pub fn report(run_dirs: &[PathBuf]) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for dir in run_dirs {
        let record = RunRecord::load(dir)?;
        rows.push(TableRow {
            method: record.method,
            weights: record.weights,
            task: record.task,
            kappa: record.metrics.as_ref().and_then(|m| m.kappa),
            auc1: record.metrics.as_ref().and_then(|m| m.auc1),
            auc2: record.metrics.as_ref().and_then(|m| m.auc2),
            auc3: record.metrics.as_ref().and_then(|m| m.auc3),
        });
    }
    let method_order = |m: &str| match m {
        "NODE" => 0,
        "NODE-RNN" => 1,
        "NODE-LSTM" => 2,
        "NODE-GRU" => 3,
        _ => 4,
    };
    let weight_order = |w: &str| match w {
        "scratch" => 0,
        "simclr_dpa" => 1,
        "byol_tetc" => 2,
        _ => 3,
    };
    rows.sort_by(|a, b| {
        weight_order(&a.weights)
            .cmp(&weight_order(&b.weights))
            .then(method_order(&a.method).cmp(&method_order(&b.method)))
            .then(a.task.cmp(&b.task))
    });
    Ok(rows)
}

/// A dry-run plan: the resolved configuration plus derived quantities,
/// printed instead of computing.
#[derive(Debug, Serialize)]
pub struct RunPlan {
    pub config_hash: String,
    pub n_patients: usize,
    pub scheme: String,
    pub head: String,
    pub task: String,
    pub epochs_pretrain: usize,
    pub epochs_finetune: usize,
    pub precision: String,
}

pub fn plan(cfg: &ExperimentConfig) -> Result<RunPlan> {
    cfg.validate()?;
    Ok(RunPlan {
        config_hash: cfg.hash()?,
        n_patients: cfg.cohort.n_patients,
        scheme: cfg.scheme.label().into(),
        head: cfg.head.label().into(),
        task: cfg.task.label(),
        epochs_pretrain: cfg.hyper.epochs_pretrain,
        epochs_finetune: cfg.hyper.epochs_finetune,
        precision: match cfg.precision {
            crate::tensor::Precision::F32 => "f32".into(),
            crate::tensor::Precision::F64 => "f64".into(),
        },
    })
}

// Re-exported for the CLI and tests.
pub use train::head_inputs;
