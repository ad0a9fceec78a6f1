//! Shared training machinery: loss-curve rows, stability monitoring,
//! gradient reduction, the supervised fine-tuning loop, and evaluation of a
//! model bundle on a task split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::{TaskExample, TaskSplits, Visit};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::metrics::{task_metrics, TaskMetrics};
use crate::model::{
    classify, ode_rnn_rollout, ode_rnn_rollout_tape, predict_latent, Classification, HeadKind,
    ModelBundle,
};
use crate::optim::{AdamW, OneCycle};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One structured loss-curve row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub step: usize,
    pub scheme: String,
    pub loss: f64,
    pub grad_norm: f64,
    pub nan_flag: bool,
}

/// Write curve rows as CSV with a fixed header.
pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "epoch,step,scheme,loss,grad_norm,nan_flag")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.epoch, r.step, r.scheme, r.loss, r.grad_norm, r.nan_flag
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct StepRef {
    pub epoch: usize,
    pub step: usize,
}

/// Observable training-stability record: every NaN event with its step
/// provenance, the largest gradient norm seen, and the divergence point if
/// the run aborted.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct StabilityReport {
    pub nan_events: Vec<StepRef>,
    pub max_grad_norm: f64,
    pub divergence: Option<StepRef>,
    /// Times the reverse-horizon augmentation had to be clamped.
    pub clamp_events: usize,
}

impl StabilityReport {
    pub fn record_nan(&mut self, epoch: usize, step: usize) {
        self.nan_events.push(StepRef { epoch, step });
    }

    pub fn mark_divergence(&mut self, epoch: usize, step: usize) {
        if self.divergence.is_none() {
            self.divergence = Some(StepRef { epoch, step });
        }
    }

    pub fn observe_grad_norm(&mut self, norm: f64) {
        if norm.is_finite() {
            self.max_grad_norm = self.max_grad_norm.max(norm);
        }
    }
}

/// Sum gradient maps elementwise; shapes must agree.
pub fn merge_grads(
    total: &mut BTreeMap<String, Tensor>,
    part: BTreeMap<String, Tensor>,
) -> Result<()> {
    for (name, grad) in part {
        match total.get_mut(&name) {
            Some(t) => t.axpy(&grad, 1.0)?,
            None => {
                total.insert(name, grad);
            }
        }
    }
    Ok(())
}

/// Euclidean norm over the whole gradient map.
pub fn total_grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// The visit history a head consumes: the plain NODE head uses only the most
/// recent exam; recurrent heads ingest the whole available prefix.
pub fn head_inputs(head: HeadKind, example: &TaskExample) -> &[Visit] {
    match head {
        HeadKind::Node => {
            let n = example.input_visits.len();
            &example.input_visits[n - 1..]
        }
        _ => &example.input_visits,
    }
}

fn visits_as_tensors(visits: &[Visit]) -> Vec<(f64, Tensor)> {
    visits.iter().map(|v| (v.t, v.observation())).collect()
}

/// Full prediction pipeline for one example: rollout over the input visits,
/// flow to the target time, classify.
pub fn predict_example(
    bundle: &ModelBundle,
    head: HeadKind,
    example: &TaskExample,
    cfg: &ExperimentConfig,
) -> Result<Classification> {
    let cell = bundle
        .cell
        .as_ref()
        .ok_or_else(|| Error::Contract("bundle has no cell attached".into()))?;
    let classifier = bundle
        .classifier
        .as_ref()
        .ok_or_else(|| Error::Contract("bundle has no classifier attached".into()))?;
    let inputs = visits_as_tensors(head_inputs(head, example));
    let h_last = ode_rnn_rollout(
        &inputs,
        &bundle.encoder,
        &bundle.projector,
        &bundle.field,
        cell,
        &cfg.solver,
    )?;
    let t_last = inputs.last().unwrap().0;
    let h_target = predict_latent(&h_last, t_last, example.target_time, &bundle.field, &cfg.solver)?;
    classify(&h_target, classifier)
}

/// Evaluate a bundle on a set of examples. Undefined thresholds come back as
/// absent metrics rather than errors.
pub fn evaluate(
    bundle: &ModelBundle,
    head: HeadKind,
    examples: &[TaskExample],
    cfg: &ExperimentConfig,
) -> Result<TaskMetrics> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation over an empty split".into()));
    }
    let outputs: Vec<Result<Classification>> = examples
        .par_iter()
        .map(|ex| predict_example(bundle, head, ex, cfg))
        .collect();
    let mut tails = Vec::with_capacity(examples.len());
    let mut preds = Vec::with_capacity(examples.len());
    let mut truths = Vec::with_capacity(examples.len());
    for (out, ex) in outputs.into_iter().zip(examples) {
        let c = out?;
        tails.push(c.tail_scores);
        preds.push(c.pred_grade);
        truths.push(ex.target_grade);
    }
    task_metrics(&tails, &preds, &truths)
}

/// One supervised batch: cross-entropy on the severity grade at the target
/// time, mean-reduced over the batch.
fn supervised_step(
    batch: &[&TaskExample],
    bundle: &ModelBundle,
    head: HeadKind,
    cfg: &ExperimentConfig,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let cell = bundle.cell.as_ref().expect("cell attached");
    let classifier = bundle.classifier.as_ref().expect("classifier attached");
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<Result<(f64, BTreeMap<String, Tensor>)>> = batch
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new(cfg.precision);
            let inputs = visits_as_tensors(head_inputs(head, ex));
            let h_last = ode_rnn_rollout_tape(
                &mut tape,
                &inputs,
                &bundle.encoder,
                &bundle.projector,
                &bundle.field,
                cell,
                &cfg.solver,
                cfg.grad_mode,
            )?;
            let binding = bundle.field.bind(&mut tape, "field")?;
            let t_last = inputs.last().unwrap().0;
            let h_target = tape.ode_solve(
                h_last,
                &binding,
                t_last,
                ex.target_time,
                &cfg.solver,
                cfg.grad_mode,
            )?;
            let logits = classifier.forward_tape(&mut tape, "classifier", h_target)?;
            let log_probs = tape.log_softmax(logits)?;
            let mut one_hot = vec![0.0; crate::model::GRADE_COUNT];
            one_hot[ex.target_grade as usize] = 1.0;
            let mask = tape.input(Tensor::vector(one_hot))?;
            let picked = tape.dot(log_probs, mask)?;
            let loss = tape.affine(picked, -1.0, 0.0)?;
            let value = tape.value(loss).item()?;
            let grads = tape.backward_seeded(&[(loss, Tensor::scalar(scale))])?;
            Ok((value, grads.into_params()))
        })
        .collect();

    let mut total = BTreeMap::new();
    let mut loss_sum = 0.0;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss;
        merge_grads(&mut total, grads)?;
    }
    Ok((loss_sum * scale, total))
}

/// Outcome of a fine-tuning run. `best` is the bundle snapshot with the
/// highest validation selection score (epoch 0 is the untrained model, so a
/// zero-epoch run still yields a usable best model). A diverged run keeps
/// its best-so-far snapshot and sets `divergence_cause`.
#[derive(Debug)]
pub struct FinetuneResult {
    pub best: ModelBundle,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub val_history: Vec<Option<f64>>,
    pub curve: Vec<CurveRow>,
    pub stability: StabilityReport,
    pub divergence_cause: Option<String>,
}

const STREAM_FINETUNE_SHUFFLE: u64 = 4;

/// Train classifier head, cell, field, projector, and encoder on the task
/// splits, monitoring the validation score each epoch and keeping the best
/// snapshot.
pub fn finetune(
    mut bundle: ModelBundle,
    head: HeadKind,
    splits: &TaskSplits,
    cfg: &ExperimentConfig,
) -> Result<FinetuneResult> {
    if bundle.cell.is_none() || bundle.classifier.is_none() {
        return Err(Error::Contract("finetune requires cell and classifier attached".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(STREAM_FINETUNE_SHUFFLE);

    let epochs = cfg.hyper.epochs_finetune;
    let batch = cfg.hyper.batch_size;
    let steps_per_epoch = splits.train.len().div_ceil(batch);
    let schedule = OneCycle::new(cfg.hyper.lr, epochs * steps_per_epoch);
    let mut optimizer = AdamW::new(cfg.hyper.weight_decay);

    let scheme_label = format!("finetune_{}", head.label().to_lowercase());
    let mut curve = Vec::new();
    let mut stability = StabilityReport::default();
    let mut val_history = Vec::with_capacity(epochs + 1);

    // Epoch 0: evaluate the starting point before any update.
    let initial = evaluate(&bundle, head, &splits.val, cfg)?;
    let mut best_val = initial.selection_score().unwrap_or(f64::NEG_INFINITY);
    let mut best = bundle.clone();
    let mut best_epoch = 0usize;
    val_history.push(initial.selection_score());

    let mut divergence_cause = None;
    let mut global_step = 0usize;
    'training: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..splits.train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch) {
            let batch_examples: Vec<&TaskExample> =
                chunk.iter().map(|&i| &splits.train[i]).collect();
            let lr = schedule.lr(global_step);
            let (loss, grads) = match supervised_step(&batch_examples, &bundle, head, cfg) {
                Ok(ok) => ok,
                Err(e) if e.is_instability() => {
                    stability.record_nan(epoch, global_step);
                    stability.mark_divergence(epoch, global_step);
                    curve.push(CurveRow {
                        epoch,
                        step: global_step,
                        scheme: scheme_label.clone(),
                        loss: f64::NAN,
                        grad_norm: f64::NAN,
                        nan_flag: true,
                    });
                    divergence_cause = Some(e.to_string());
                    break 'training;
                }
                Err(e) => return Err(e),
            };
            let grad_norm = total_grad_norm(&grads);
            if !loss.is_finite() || !grad_norm.is_finite() {
                stability.record_nan(epoch, global_step);
                stability.mark_divergence(epoch, global_step);
                curve.push(CurveRow {
                    epoch,
                    step: global_step,
                    scheme: scheme_label.clone(),
                    loss,
                    grad_norm,
                    nan_flag: true,
                });
                divergence_cause = Some("non-finite loss or gradient".into());
                break 'training;
            }
            stability.observe_grad_norm(grad_norm);
            let mut params = bundle.named_params_mut();
            optimizer.step(&mut params, &grads, lr)?;
            drop(params);
            curve.push(CurveRow {
                epoch,
                step: global_step,
                scheme: scheme_label.clone(),
                loss,
                grad_norm,
                nan_flag: false,
            });
            global_step += 1;
        }

        match evaluate(&bundle, head, &splits.val, cfg) {
            Ok(val) => {
                let score = val.selection_score();
                val_history.push(score);
                if let Some(s) = score {
                    if s > best_val {
                        best_val = s;
                        best = bundle.clone();
                        best_epoch = epoch + 1;
                    }
                }
            }
            Err(e) if e.is_instability() => {
                stability.record_nan(epoch, global_step);
                stability.mark_divergence(epoch, global_step);
                divergence_cause = Some(format!("validation failed: {e}"));
                break 'training;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(FinetuneResult {
        best,
        best_epoch,
        best_val_score: best_val,
        val_history,
        curve,
        stability,
        divergence_cause,
    })
}

/// Attach a fresh cell/classifier pair for `head` on top of (possibly
/// pre-trained) encoder/projector/field weights.
pub fn prepare_for_head(
    mut bundle: ModelBundle,
    head: HeadKind,
    cfg: &ExperimentConfig,
) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(5);
    bundle.attach_head(head, &cfg.arch.classifier_hidden, &mut rng)?;
    Ok(bundle)
}

/// A fresh scratch bundle with head attached, for the no-pretraining arm.
pub fn scratch_bundle(obs_dim: usize, head: HeadKind, cfg: &ExperimentConfig) -> Result<ModelBundle> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let bundle = ModelBundle::init_pretrain(
        obs_dim,
        &cfg.arch.encoder_hidden,
        cfg.arch.repr_dim,
        cfg.arch.latent_dim,
        &cfg.arch.field_hidden,
        &mut rng,
    )?;
    prepare_for_head(bundle, head, cfg)
}
