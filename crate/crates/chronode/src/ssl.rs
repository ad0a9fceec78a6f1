//! Self-supervised pre-training of the time-aware head.
//!
//! Two schemes:
//!
//! * **Disease progression alignment** (SimCLR-style): each consecutive-visit
//!   pair yields two solves of the same IVP to slightly perturbed horizons
//!   `t_i + dt + delta_plus` and `t_i + dt - delta_minus`; the two endpoint
//!   latents form a positive pair in an NT-Xent loss over the batch. The
//!   perturbation interval derives from the per-pair severity rate of
//!   variation (or a fixed/random interval in the ablation arms).
//! * **Temporal evolution / temporal consistency** (BYOL-style): an online
//!   network predicts the next visit's latent through the forward IVP (and,
//!   with the consistency term, the previous visit's latent through the
//!   reverse-time FVP) against L2-normalized targets from an EMA copy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cohort::PairSample;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{FieldBinding, ModelBundle, VectorField};
use crate::ode::SolverConfig;
use crate::optim::{AdamW, OneCycle};
use crate::tape::{GradMode, Gradients, Tape, ValueId};
use crate::tensor::Tensor;
use crate::train::{merge_grads, total_grad_norm, CurveRow, StabilityReport};

/// Pre-training scheme selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    SimclrDpa,
    #[default]
    ByolTetc,
}

impl Scheme {
    pub fn label(self) -> &'static str {
        match self {
            Scheme::SimclrDpa => "simclr_dpa",
            Scheme::ByolTetc => "byol_tetc",
        }
    }
}

/// How the augmentation interval is chosen per pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeltaMode {
    /// Interval proportional to the observed severity rate of variation,
    /// with the three-month default when the rate is zero.
    #[default]
    Aligned,
    /// Constant three-month interval for every pair.
    Fixed,
    /// Random interval, ignoring severity.
    Unaligned,
}

/// Interval applied when severity did not change between the two visits.
pub const THREE_MONTH_DELTA: f64 = 0.25;
/// Default multiplier turning a severity rate into an interval (years).
pub const DEFAULT_DELTA_SCALE: f64 = 12.0 / 365.0;
/// Upper bound of the unaligned random interval.
const UNALIGNED_MAX_DELTA: f64 = 0.5;

/// Per-pair time augmentation: the severity rate, the derived interval, and
/// its two sampled sub-intervals. `delta_plus + delta_minus == delta` holds
/// bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaAug {
    pub rate: f64,
    pub delta: f64,
    pub delta_plus: f64,
    pub delta_minus: f64,
}

/// Derive the augmentation interval for one pair and split it uniformly.
pub fn compute_delta<R: Rng>(
    grade_a: u8,
    grade_b: u8,
    t_a: f64,
    t_b: f64,
    mode: DeltaMode,
    delta_scale: f64,
    rng: &mut R,
) -> Result<DeltaAug> {
    if !(t_b > t_a) {
        return Err(Error::Contract(format!(
            "compute_delta requires t_b > t_a, got {t_a} -> {t_b}"
        )));
    }
    let rate = (grade_b as f64 - grade_a as f64) / (t_b - t_a);
    let delta = match mode {
        DeltaMode::Aligned => {
            let d = rate.abs() * delta_scale;
            if d == 0.0 {
                THREE_MONTH_DELTA
            } else {
                d
            }
        }
        DeltaMode::Fixed => THREE_MONTH_DELTA,
        DeltaMode::Unaligned => rng.gen::<f64>() * UNALIGNED_MAX_DELTA,
    };
    // Round the larger piece and recover the smaller one by subtraction;
    // with the larger piece in [delta/2, delta] the subtraction is exact
    // (Sterbenz), so the two pieces always sum back to delta bit-exactly.
    let u: f64 = rng.gen();
    let (delta_plus, delta_minus) = if u > 0.5 {
        let plus = u * delta;
        (plus, delta - plus)
    } else {
        let minus = (1.0 - u) * delta;
        (delta - minus, minus)
    };
    Ok(DeltaAug {
        rate,
        delta,
        delta_plus,
        delta_minus,
    })
}

/// The two augmented views of one pair, as plain values.
#[derive(Debug, Clone)]
pub struct DpaViews {
    pub a: Tensor,
    pub b: Tensor,
    /// True when `delta_minus` had to shrink to keep the second horizon
    /// ahead of the start time.
    pub clamped: bool,
}

fn effective_minus(delta_t: f64, aug: &DeltaAug) -> (f64, bool) {
    if delta_t - aug.delta_minus > 0.0 {
        (aug.delta_minus, false)
    } else {
        (delta_t / 2.0, true)
    }
}

/// Solve the same IVP from `h` at `t_i` to the two perturbed horizons
/// `t_i + dt + delta_plus` and `t_i + dt - delta_minus`.
pub fn dpa_views(
    h: &Tensor,
    t_i: f64,
    delta_t: f64,
    aug: &DeltaAug,
    field: &VectorField,
    cfg: &SolverConfig,
) -> Result<DpaViews> {
    let (minus, clamped) = effective_minus(delta_t, aug);
    let a = crate::ode::ode_solve(h, field, t_i, t_i + delta_t + aug.delta_plus, cfg)?.h_end;
    let b = crate::ode::ode_solve(h, field, t_i, t_i + delta_t - minus, cfg)?.h_end;
    Ok(DpaViews { a, b, clamped })
}

/// Tape version of [`dpa_views`]; the returned ids are the two endpoint
/// latents as differentiable nodes.
pub fn dpa_views_tape(
    tape: &mut Tape,
    h: ValueId,
    t_i: f64,
    delta_t: f64,
    aug: &DeltaAug,
    binding: &FieldBinding,
    cfg: &SolverConfig,
    mode: GradMode,
) -> Result<(ValueId, ValueId, bool)> {
    let (minus, clamped) = effective_minus(delta_t, aug);
    let a = tape.ode_solve(h, binding, t_i, t_i + delta_t + aug.delta_plus, cfg, mode)?;
    let b = tape.ode_solve(h, binding, t_i, t_i + delta_t - minus, cfg, mode)?;
    Ok((a, b, clamped))
}

/// NT-Xent over N positive pairs (2N views): per anchor, the positive is its
/// partner and the denominator runs over the other 2N-1 embeddings, with
/// cosine similarity at temperature `tau`. Returns the mean over all 2N
/// anchors.
pub fn nt_xent_loss(tape: &mut Tape, pairs: &[(ValueId, ValueId)], tau: f64) -> Result<ValueId> {
    if pairs.len() < 2 {
        return Err(Error::Contract("nt_xent_loss needs at least 2 pairs".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let views: Vec<ValueId> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let n_views = views.len();
    let normalized: Vec<ValueId> = views
        .iter()
        .map(|&v| tape.l2_normalize(v))
        .collect::<Result<_>>()?;

    // Cosine similarities, computed once per unordered pair.
    let mut sim = vec![vec![None::<ValueId>; n_views]; n_views];
    for i in 0..n_views {
        for j in (i + 1)..n_views {
            let s = tape.dot(normalized[i], normalized[j])?;
            sim[i][j] = Some(s);
            sim[j][i] = Some(s);
        }
    }

    let mut anchor_losses = Vec::with_capacity(n_views);
    for i in 0..n_views {
        let partner = i ^ 1;
        let mut sims = Vec::with_capacity(n_views - 1);
        let mut positive_pos = 0;
        for j in 0..n_views {
            if j == i {
                continue;
            }
            if j == partner {
                positive_pos = sims.len();
            }
            sims.push(sim[i][j].unwrap());
        }
        let s_vec = tape.concat(&sims)?;
        let scaled = tape.affine(s_vec, 1.0 / tau, 0.0)?;
        let log_probs = tape.log_softmax(scaled)?;
        let mut one_hot = vec![0.0; n_views - 1];
        one_hot[positive_pos] = 1.0;
        let mask = tape.input(Tensor::vector(one_hot))?;
        let picked = tape.dot(log_probs, mask)?;
        anchor_losses.push(tape.affine(picked, -1.0, 0.0)?);
    }
    let stacked = tape.concat(&anchor_losses)?;
    tape.mean(stacked)
}

/// Online/target parameter pair for the BYOL scheme. The target is a
/// non-gradient copy updated as `target <- decay * target + (1 - decay) * online`.
#[derive(Debug, Clone)]
pub struct EmaPair {
    pub online: ModelBundle,
    pub target: ModelBundle,
    pub decay: f64,
}

impl EmaPair {
    /// Start the target as an exact copy of the online network.
    pub fn new(online: ModelBundle, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay <= 1.0) {
            return Err(Error::Contract("ema decay must be in (0, 1]".into()));
        }
        let target = online.clone();
        Ok(EmaPair {
            online,
            target,
            decay,
        })
    }
}

/// Elementwise convex update of the target parameters; the online side is
/// untouched. `decay == 1` freezes the target permanently.
pub fn ema_update(pair: &mut EmaPair) -> Result<()> {
    if !(pair.decay > 0.0 && pair.decay <= 1.0) {
        return Err(Error::Contract("ema decay must be in (0, 1]".into()));
    }
    let decay = pair.decay;
    let online: Vec<(String, Tensor)> = pair
        .online
        .named_params()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let mut target = pair.target.named_params_mut();
    if online.len() != target.len() {
        return Err(Error::Contract("ema: online/target parameter sets differ".into()));
    }
    for ((name_o, mu), (name_t, xi)) in online.iter().zip(target.iter_mut()) {
        if name_o != name_t {
            return Err(Error::Contract(format!(
                "ema: parameter order mismatch {name_o} vs {name_t}"
            )));
        }
        if !mu.same_shape(xi) {
            return Err(Error::Contract(format!("ema: shape mismatch at {name_o}")));
        }
        for (x, m) in xi.data_mut().iter_mut().zip(mu.data()) {
            *x = decay * *x + (1.0 - decay) * m;
        }
    }
    Ok(())
}

/// Loss nodes of one BYOL element.
#[derive(Debug, Clone, Copy)]
pub struct ByolLossNodes {
    pub forward: ValueId,
    pub backward: Option<ValueId>,
    pub total: ValueId,
}

/// Build the BYOL losses for one pair on a tape.
///
/// Forward (temporal evolution): the online latent of the first visit flows
/// along the IVP to the second visit's time and regresses the target
/// projection of the second observation. Backward (temporal consistency):
/// the online latent of the second visit flows back through the FVP and
/// regresses the target projection of the first observation. Both sides are
/// L2-normalized; target latents are computed outside the tape so no
/// gradient reaches the target parameters.
#[allow(clippy::too_many_arguments)]
pub fn byol_losses(
    tape: &mut Tape,
    pair: &PairSample,
    online: &ModelBundle,
    target: &ModelBundle,
    shared_encoder: bool,
    with_tc: bool,
    solver: &SolverConfig,
    mode: GradMode,
) -> Result<ByolLossNodes> {
    let binding = online.field.bind(tape, "field")?;

    let target_latent = |x: &Tensor| -> Result<Tensor> {
        let enc = if shared_encoder {
            &online.encoder
        } else {
            &target.encoder
        };
        let y = enc.net.forward(x)?;
        target.projector.net.forward(&y)?.l2_normalized()
    };

    let online_latent = |tape: &mut Tape, x: &Tensor| -> Result<ValueId> {
        let xid = tape.input(x.clone())?;
        let y = online.encoder.net.forward_tape(tape, "encoder", xid)?;
        online.projector.net.forward_tape(tape, "projector", y)
    };

    let mse = |tape: &mut Tape, pred: ValueId, tgt: &Tensor| -> Result<ValueId> {
        let norm_pred = tape.l2_normalize(pred)?;
        let tgt_id = tape.input(tgt.clone())?;
        let diff = tape.sub(norm_pred, tgt_id)?;
        let sq = tape.mul(diff, diff)?;
        tape.sum(sq)
    };

    // Temporal evolution: predict the next latent through the IVP.
    let h_a = online_latent(tape, &pair.x_a)?;
    let pred_b = tape.ode_solve(h_a, &binding, pair.t_a, pair.t_b, solver, mode)?;
    let tgt_b = target_latent(&pair.x_b)?;
    let forward = mse(tape, pred_b, &tgt_b)?;

    // Temporal consistency: predict the previous latent through the FVP.
    let backward = if with_tc {
        let h_b = online_latent(tape, &pair.x_b)?;
        let pred_a = tape.ode_solve(h_b, &binding, pair.t_b, pair.t_a, solver, mode)?;
        let tgt_a = target_latent(&pair.x_a)?;
        Some(mse(tape, pred_a, &tgt_a)?)
    } else {
        None
    };

    let total = match backward {
        Some(b) => tape.add(forward, b)?,
        None => forward,
    };
    Ok(ByolLossNodes {
        forward,
        backward,
        total,
    })
}

/// Outcome of a pre-training run. A numerically diverged run is still a
/// result: the curve and stability report carry the step provenance, and
/// `divergence_cause` is set (the harness maps this to its own exit code).
#[derive(Debug)]
pub struct PretrainResult {
    pub bundle: ModelBundle,
    pub curve: Vec<CurveRow>,
    pub stability: StabilityReport,
    pub divergence_cause: Option<String>,
}

/// RNG streams derived from the experiment seed.
const STREAM_WEIGHTS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DELTA: u64 = 3;

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shuffled_indices<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Pre-train encoder, projector, and field on the consecutive-pair set with
/// the configured scheme. Deterministic under `(config, seed)`.
pub fn pretrain(pairs: &[PairSample], cfg: &ExperimentConfig) -> Result<PretrainResult> {
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    if pairs.is_empty() {
        return Err(Error::Contract("pretrain requires a non-empty pair set".into()));
    }
    let obs_dim = pairs[0].x_a.len();
    let mut weight_rng = seeded(cfg.seed, STREAM_WEIGHTS);
    let online = ModelBundle::init_pretrain(
        obs_dim,
        &cfg.arch.encoder_hidden,
        cfg.arch.repr_dim,
        cfg.arch.latent_dim,
        &cfg.arch.field_hidden,
        &mut weight_rng,
    )?;
    let mut ema = EmaPair::new(online, cfg.ema_decay)?;

    let mut shuffle_rng = seeded(cfg.seed, STREAM_SHUFFLE);
    let mut delta_rng = seeded(cfg.seed, STREAM_DELTA);

    let epochs = cfg.hyper.epochs_pretrain;
    let batch = cfg.hyper.batch_size;
    let steps_per_epoch = pairs.len().div_ceil(batch);
    let schedule = OneCycle::new(cfg.hyper.lr, epochs * steps_per_epoch);
    let mut optimizer = AdamW::new(cfg.hyper.weight_decay);

    let mut curve = Vec::new();
    let mut stability = StabilityReport::default();
    let mut divergence_cause = None;
    let mut global_step = 0usize;

    'training: for epoch in 0..epochs {
        let order = shuffled_indices(pairs.len(), &mut shuffle_rng);
        for chunk in order.chunks(batch) {
            // NT-Xent needs at least two pairs to have any negatives.
            if cfg.scheme == Scheme::SimclrDpa && chunk.len() < 2 {
                continue;
            }
            let batch_pairs: Vec<&PairSample> = chunk.iter().map(|&i| &pairs[i]).collect();
            let lr = schedule.lr(global_step);

            let step_result = match cfg.scheme {
                Scheme::SimclrDpa => {
                    simclr_step(&batch_pairs, &ema.online, cfg, &mut delta_rng, &mut stability)
                }
                Scheme::ByolTetc => byol_step(&batch_pairs, &ema, cfg),
            };
            let (loss, grads) = match step_result {
                Ok(ok) => ok,
                Err(e) if e.is_instability() => {
                    stability.record_nan(epoch, global_step);
                    stability.mark_divergence(epoch, global_step);
                    curve.push(CurveRow {
                        epoch,
                        step: global_step,
                        scheme: cfg.scheme.label().to_string(),
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
                    scheme: cfg.scheme.label().to_string(),
                    loss,
                    grad_norm,
                    nan_flag: true,
                });
                divergence_cause = Some("non-finite loss or gradient".into());
                break 'training;
            }
            stability.observe_grad_norm(grad_norm);

            let mut params = ema.online.named_params_mut();
            optimizer.step(&mut params, &grads, lr)?;
            drop(params);
            if cfg.scheme == Scheme::ByolTetc {
                ema_update(&mut ema)?;
            }

            curve.push(CurveRow {
                epoch,
                step: global_step,
                scheme: cfg.scheme.label().to_string(),
                loss,
                grad_norm,
                nan_flag: false,
            });
            global_step += 1;
        }
    }

    Ok(PretrainResult {
        bundle: ema.online,
        curve,
        stability,
        divergence_cause,
    })
}

/// One SimCLR/DPA batch: per-element tapes produce the two views, a small
/// separate tape couples them through NT-Xent, and the view cotangents are
/// pushed back through each element's tape (solves run their adjoint there).
fn simclr_step(
    batch: &[&PairSample],
    online: &ModelBundle,
    cfg: &ExperimentConfig,
    delta_rng: &mut ChaCha8Rng,
    stability: &mut StabilityReport,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    // Draw augmentation intervals sequentially so parallelism cannot change
    // the RNG stream.
    let augs: Vec<DeltaAug> = batch
        .iter()
        .map(|p| {
            compute_delta(
                p.grade_a,
                p.grade_b,
                p.t_a,
                p.t_b,
                cfg.delta_mode,
                cfg.delta_scale,
                delta_rng,
            )
        })
        .collect::<Result<_>>()?;

    struct ElementForward {
        tape: Tape,
        view_a: ValueId,
        view_b: ValueId,
        clamped: bool,
    }

    let forwards: Vec<Result<ElementForward>> = batch
        .par_iter()
        .zip(&augs)
        .map(|(pair, aug)| {
            let mut tape = Tape::new(cfg.precision);
            let x = tape.input(pair.x_a.clone())?;
            let y = online.encoder.net.forward_tape(&mut tape, "encoder", x)?;
            let h = online.projector.net.forward_tape(&mut tape, "projector", y)?;
            let binding = online.field.bind(&mut tape, "field")?;
            let (view_a, view_b, clamped) = dpa_views_tape(
                &mut tape,
                h,
                pair.t_a,
                pair.delta_t(),
                aug,
                &binding,
                &cfg.solver,
                cfg.grad_mode,
            )?;
            Ok(ElementForward {
                tape,
                view_a,
                view_b,
                clamped,
            })
        })
        .collect();
    let forwards: Vec<ElementForward> = forwards.into_iter().collect::<Result<_>>()?;
    stability.clamp_events += forwards.iter().filter(|f| f.clamped).count();

    // Couple the views through the contrastive loss on a fresh tape.
    let mut loss_tape = Tape::new(cfg.precision);
    let mut view_ids = Vec::with_capacity(2 * forwards.len());
    for f in &forwards {
        let a = loss_tape.input(f.tape.value(f.view_a).clone())?;
        let b = loss_tape.input(f.tape.value(f.view_b).clone())?;
        view_ids.push((a, b));
    }
    let loss_id = nt_xent_loss(&mut loss_tape, &view_ids, cfg.temperature)?;
    let loss = loss_tape.value(loss_id).item()?;
    let loss_grads = loss_tape.backward(loss_id)?;

    // Push the cotangents back through each element.
    let element_grads: Vec<Result<Gradients>> = forwards
        .par_iter()
        .zip(&view_ids)
        .map(|(f, &(a_id, b_id))| {
            let mut seeds = Vec::with_capacity(2);
            if let Some(g) = loss_grads.at(a_id) {
                seeds.push((f.view_a, g.clone()));
            }
            if let Some(g) = loss_grads.at(b_id) {
                seeds.push((f.view_b, g.clone()));
            }
            f.tape.backward_seeded(&seeds)
        })
        .collect();

    let mut total = std::collections::BTreeMap::new();
    for g in element_grads {
        merge_grads(&mut total, g?.into_params())?;
    }
    Ok((loss, total))
}

/// One BYOL batch: independent per-element losses, mean-reduced.
fn byol_step(
    batch: &[&PairSample],
    ema: &EmaPair,
    cfg: &ExperimentConfig,
) -> Result<(f64, std::collections::BTreeMap<String, Tensor>)> {
    let scale = 1.0 / batch.len() as f64;
    let results: Vec<Result<(f64, Gradients)>> = batch
        .par_iter()
        .map(|pair| {
            let mut tape = Tape::new(cfg.precision);
            let nodes = byol_losses(
                &mut tape,
                pair,
                &ema.online,
                &ema.target,
                cfg.shared_encoder,
                cfg.with_tc,
                &cfg.solver,
                cfg.grad_mode,
            )?;
            let loss = tape.value(nodes.total).item()?;
            let grads = tape.backward_seeded(&[(nodes.total, Tensor::scalar(scale))])?;
            Ok((loss, grads))
        })
        .collect();

    let mut total = std::collections::BTreeMap::new();
    let mut loss_sum = 0.0;
    for r in results {
        let (loss, grads) = r?;
        loss_sum += loss;
        merge_grads(&mut total, grads.into_params())?;
    }
    Ok((loss_sum * scale, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Encoder, Projector};
    use crate::nn::{Activation, DenseNet, NetLayout};
    use crate::tensor::Precision;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn identity_net(dim: usize) -> DenseNet {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        DenseNet::from_parts(
            &NetLayout {
                dims: vec![dim, dim],
                activations: vec![Activation::Identity],
            },
            vec![
                Tensor::matrix(dim, dim, w).unwrap(),
                Tensor::zeros(vec![dim]),
            ],
        )
        .unwrap()
    }

    fn zero_field(dim: usize) -> VectorField {
        VectorField::from_net(
            DenseNet::from_parts(
                &NetLayout {
                    dims: vec![dim + 1, dim],
                    activations: vec![Activation::Identity],
                },
                vec![
                    Tensor::zeros(vec![dim, dim + 1]),
                    Tensor::zeros(vec![dim]),
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn linear_scalar_field() -> VectorField {
        VectorField::from_net(
            DenseNet::from_parts(
                &NetLayout {
                    dims: vec![2, 1],
                    activations: vec![Activation::Identity],
                },
                vec![
                    Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
                    Tensor::vector(vec![0.0]),
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn stable_severity_gets_three_month_default() {
        let aug = compute_delta(2, 2, 0.0, 1.0, DeltaMode::Aligned, DEFAULT_DELTA_SCALE, &mut rng(0))
            .unwrap();
        assert_eq!(aug.rate, 0.0);
        assert_eq!(aug.delta, THREE_MONTH_DELTA);
    }

    #[test]
    fn unit_rate_gives_literal_formula_interval() {
        let aug = compute_delta(2, 3, 0.0, 1.0, DeltaMode::Aligned, DEFAULT_DELTA_SCALE, &mut rng(0))
            .unwrap();
        assert_eq!(aug.rate, 1.0);
        assert_eq!(aug.delta, 12.0 / 365.0);
        assert!((aug.delta - 0.032877).abs() < 1e-6);
    }

    #[test]
    fn negative_rate_uses_magnitude() {
        let aug = compute_delta(3, 1, 0.0, 0.5, DeltaMode::Aligned, DEFAULT_DELTA_SCALE, &mut rng(0))
            .unwrap();
        assert_eq!(aug.rate, -4.0);
        assert_eq!(aug.delta, 4.0 * 12.0 / 365.0);
    }

    #[test]
    fn split_sums_back_exactly_over_many_draws() {
        let mut r = rng(7);
        for i in 0..10_000 {
            let mode = match i % 3 {
                0 => DeltaMode::Aligned,
                1 => DeltaMode::Fixed,
                _ => DeltaMode::Unaligned,
            };
            let ga = (i % 5) as u8;
            let gb = ((i / 5) % 5) as u8;
            let aug =
                compute_delta(ga, gb, 0.0, 0.3 + (i % 17) as f64 * 0.21, mode, DEFAULT_DELTA_SCALE, &mut r)
                    .unwrap();
            assert!(aug.delta_plus >= 0.0 && aug.delta_plus <= aug.delta);
            assert!(aug.delta_minus >= 0.0);
            assert_eq!(aug.delta_plus + aug.delta_minus, aug.delta, "draw {i}");
        }
    }

    #[test]
    fn fixed_and_unaligned_modes() {
        let mut r = rng(3);
        let fixed = compute_delta(0, 4, 0.0, 1.0, DeltaMode::Fixed, DEFAULT_DELTA_SCALE, &mut r).unwrap();
        assert_eq!(fixed.delta, THREE_MONTH_DELTA);
        for _ in 0..100 {
            let un = compute_delta(2, 2, 0.0, 1.0, DeltaMode::Unaligned, DEFAULT_DELTA_SCALE, &mut r)
                .unwrap();
            assert!(un.delta >= 0.0 && un.delta < 0.5);
        }
    }

    #[test]
    fn non_positive_interval_is_rejected() {
        assert!(compute_delta(0, 1, 1.0, 1.0, DeltaMode::Aligned, DEFAULT_DELTA_SCALE, &mut rng(0)).is_err());
        assert!(compute_delta(0, 1, 2.0, 1.0, DeltaMode::Aligned, DEFAULT_DELTA_SCALE, &mut rng(0)).is_err());
    }

    #[test]
    fn zero_interval_views_coincide() {
        let field = crate::model::VectorField::init(2, &[6], &mut rng(1)).unwrap();
        let aug = DeltaAug {
            rate: 0.0,
            delta: 0.0,
            delta_plus: 0.0,
            delta_minus: 0.0,
        };
        let h = Tensor::vector(vec![0.3, -0.2]);
        let v = dpa_views(&h, 0.0, 1.0, &aug, &field, &SolverConfig::default()).unwrap();
        let diff = v.a.sub(&v.b).unwrap().norm();
        assert!(diff < 1e-9, "views differ by {diff}");
    }

    #[test]
    fn zero_field_views_stay_at_start() {
        let field = zero_field(3);
        let aug = DeltaAug {
            rate: 1.0,
            delta: 0.2,
            delta_plus: 0.15,
            delta_minus: 0.05,
        };
        let h = Tensor::vector(vec![0.5, -1.0, 0.25]);
        let v = dpa_views(&h, 0.0, 2.0, &aug, &field, &SolverConfig::default()).unwrap();
        assert_eq!(v.a, h);
        assert_eq!(v.b, h);
        assert!(!v.clamped);
    }

    #[test]
    fn linear_field_views_match_exponentials() {
        let field = linear_scalar_field();
        let aug = DeltaAug {
            rate: 0.0,
            delta: 0.2,
            delta_plus: 0.12,
            delta_minus: 0.08,
        };
        let h = Tensor::scalar(0.7);
        let v = dpa_views(&h, 0.0, 1.0, &aug, &field, &SolverConfig::default()).unwrap();
        let expect_a = 0.7 * (1.0f64 + 0.12).exp();
        let expect_b = 0.7 * (1.0f64 - 0.08).exp();
        assert!((v.a.data()[0] - expect_a).abs() < 1e-4 * expect_a);
        assert!((v.b.data()[0] - expect_b).abs() < 1e-4 * expect_b);
    }

    #[test]
    fn reverse_horizon_clamps_when_interval_too_large() {
        let field = zero_field(1);
        let aug = DeltaAug {
            rate: 0.0,
            delta: 0.5,
            delta_plus: 0.1,
            delta_minus: 0.4,
        };
        // delta_t = 0.3 < delta_minus: second horizon would precede t_i.
        let v = dpa_views(&Tensor::scalar(1.0), 0.0, 0.3, &aug, &field, &SolverConfig::default())
            .unwrap();
        assert!(v.clamped);
    }

    /// Independent NT-Xent evaluation by direct enumeration over plain f64.
    fn brute_force_nt_xent(views: &[Vec<f64>], tau: f64) -> f64 {
        let norm = |v: &[f64]| -> Vec<f64> {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect()
        };
        let normed: Vec<Vec<f64>> = views.iter().map(|v| norm(v)).collect();
        let cos = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let n = normed.len();
        let mut total = 0.0;
        for i in 0..n {
            let partner = i ^ 1;
            let num = (cos(&normed[i], &normed[partner]) / tau).exp();
            let mut den = 0.0;
            for k in 0..n {
                if k != i {
                    den += (cos(&normed[i], &normed[k]) / tau).exp();
                }
            }
            total += -(num / den).ln();
        }
        total / n as f64
    }

    fn nt_xent_of(views: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::new(Precision::F64);
        let ids: Vec<ValueId> = views
            .iter()
            .map(|v| tape.input(Tensor::vector(v.clone())).unwrap())
            .collect();
        let pairs: Vec<(ValueId, ValueId)> = ids.chunks(2).map(|c| (c[0], c[1])).collect();
        let loss = nt_xent_loss(&mut tape, &pairs, tau).unwrap();
        tape.value(loss).item().unwrap()
    }

    #[test]
    fn all_identical_embeddings_give_ln3() {
        let v = vec![vec![0.3, -0.4, 0.5]; 4];
        for tau in [0.1, 0.5, 1.0, 3.0] {
            let loss = nt_xent_of(&v, tau);
            assert!((loss - 3.0f64.ln()).abs() < 1e-12, "tau {tau}: {loss}");
            assert!((loss - 1.0986).abs() < 1e-4);
        }
    }

    #[test]
    fn aligned_positives_orthogonal_negatives_fixture() {
        let views = vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ];
        let loss = nt_xent_of(&views, 0.5);
        let expected = (1.0f64 + 2.0 * (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 0.2395).abs() < 1e-4);
        assert!((loss - brute_force_nt_xent(&views, 0.5)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration_on_random_batches() {
        let mut r = rng(42);
        for n_pairs in [2usize, 3, 5] {
            let views: Vec<Vec<f64>> = (0..2 * n_pairs)
                .map(|_| (0..4).map(|_| r.gen_range(-1.0..1.0)).collect())
                .collect();
            for tau in [0.2, 0.5, 1.0] {
                let got = nt_xent_of(&views, tau);
                let want = brute_force_nt_xent(&views, tau);
                assert!((got - want).abs() < 1e-12, "n={n_pairs} tau={tau}");
            }
        }
    }

    #[test]
    fn loss_is_rotation_invariant() {
        let views = vec![
            vec![0.9, 0.1],
            vec![0.7, 0.3],
            vec![-0.2, 0.8],
            vec![-0.4, 0.5],
        ];
        let theta: f64 = 0.83;
        let rotated: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                vec![
                    theta.cos() * v[0] - theta.sin() * v[1],
                    theta.sin() * v[0] + theta.cos() * v[1],
                ]
            })
            .collect();
        let a = nt_xent_of(&views, 0.5);
        let b = nt_xent_of(&rotated, 0.5);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn loss_decreases_as_positive_cosine_rises() {
        let mut last = f64::INFINITY;
        for phi in [1.2f64, 0.9, 0.6, 0.3, 0.05] {
            let views = vec![
                vec![1.0, 0.0, 0.0],
                vec![phi.cos(), phi.sin(), 0.0],
                vec![0.0, 0.0, 1.0],
                vec![0.0, 0.0, 1.0],
            ];
            let loss = nt_xent_of(&views, 0.5);
            assert!(loss < last, "phi {phi}: {loss} !< {last}");
            last = loss;
        }
    }

    #[test]
    fn single_pair_batches_are_rejected() {
        let mut tape = Tape::new(Precision::F64);
        let a = tape.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let b = tape.input(Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert!(nt_xent_loss(&mut tape, &[(a, b)], 0.5).is_err());
        assert!(nt_xent_loss(&mut tape, &[(a, b), (a, b)], 0.0).is_err());
    }

    fn identity_bundle(dim: usize) -> ModelBundle {
        ModelBundle {
            encoder: Encoder {
                net: identity_net(dim),
            },
            projector: Projector {
                net: identity_net(dim),
            },
            field: zero_field(dim),
            cell: None,
            classifier: None,
        }
    }

    fn pair_with(x_a: Vec<f64>, x_b: Vec<f64>) -> PairSample {
        PairSample {
            patient_id: 0,
            eye: crate::cohort::Eye::L,
            x_a: Tensor::vector(x_a),
            x_b: Tensor::vector(x_b),
            t_a: 0.0,
            t_b: 1.0,
            grade_a: 1,
            grade_b: 1,
        }
    }

    #[test]
    fn perfect_prediction_gives_zero_byol_loss() {
        let online = identity_bundle(2);
        let target = online.clone();
        let pair = pair_with(vec![0.6, 0.8], vec![0.6, 0.8]);
        let mut tape = Tape::new(Precision::F64);
        let nodes = byol_losses(
            &mut tape,
            &pair,
            &online,
            &target,
            true,
            true,
            &SolverConfig::default(),
            GradMode::Adjoint,
        )
        .unwrap();
        assert_eq!(tape.value(nodes.forward).item().unwrap(), 0.0);
        assert_eq!(tape.value(nodes.backward.unwrap()).item().unwrap(), 0.0);
        assert_eq!(tape.value(nodes.total).item().unwrap(), 0.0);
    }

    #[test]
    fn orthogonal_prediction_and_target_cost_two_per_term() {
        let online = identity_bundle(2);
        let target = online.clone();
        let pair = pair_with(vec![1.0, 0.0], vec![0.0, 1.0]);
        let mut tape = Tape::new(Precision::F64);
        let nodes = byol_losses(
            &mut tape,
            &pair,
            &online,
            &target,
            true,
            true,
            &SolverConfig::default(),
            GradMode::Adjoint,
        )
        .unwrap();
        assert!((tape.value(nodes.forward).item().unwrap() - 2.0).abs() < 1e-12);
        assert!((tape.value(nodes.backward.unwrap()).item().unwrap() - 2.0).abs() < 1e-12);
        assert!((tape.value(nodes.total).item().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn byol_matches_direct_arithmetic_on_small_nets() {
        let mut r = rng(17);
        let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
        let mut target = online.clone();
        // Make the target projector differ so the oracle is non-trivial.
        for (_, t) in target.projector.net.named_params_mut("p") {
            for v in t.data_mut() {
                *v += 0.05;
            }
        }
        let pair = pair_with(vec![0.2, -0.1, 0.4], vec![0.3, 0.2, -0.2]);
        let solver = SolverConfig::default();

        let mut tape = Tape::new(Precision::F64);
        let nodes = byol_losses(
            &mut tape,
            &pair,
            &online,
            &target,
            true,
            true,
            &solver,
            GradMode::Adjoint,
        )
        .unwrap();
        let got_fwd = tape.value(nodes.forward).item().unwrap();
        let got_bwd = tape.value(nodes.backward.unwrap()).item().unwrap();

        // Independent recomputation with plain tensor math.
        let direct = |x: &Tensor, from: f64, to: f64, tgt_x: &Tensor| -> f64 {
            let h = online
                .projector
                .net
                .forward(&online.encoder.net.forward(x).unwrap())
                .unwrap();
            let pred = crate::ode::ode_solve(&h, &online.field, from, to, &solver)
                .unwrap()
                .h_end
                .l2_normalized()
                .unwrap();
            let tgt = target
                .projector
                .net
                .forward(&online.encoder.net.forward(tgt_x).unwrap())
                .unwrap()
                .l2_normalized()
                .unwrap();
            pred.sub(&tgt).unwrap().data().iter().map(|v| v * v).sum()
        };
        let want_fwd = direct(&pair.x_a, 0.0, 1.0, &pair.x_b);
        let want_bwd = direct(&pair.x_b, 1.0, 0.0, &pair.x_a);
        assert!((got_fwd - want_fwd).abs() < 1e-12);
        assert!((got_bwd - want_bwd).abs() < 1e-12);
    }

    #[test]
    fn byol_total_loss_is_bounded_by_eight() {
        let mut r = rng(23);
        for _ in 0..10 {
            let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
            let target = online.clone();
            let pair = pair_with(
                (0..3).map(|_| r.gen_range(-2.0..2.0)).collect(),
                (0..3).map(|_| r.gen_range(-2.0..2.0)).collect(),
            );
            let mut tape = Tape::new(Precision::F64);
            let nodes = byol_losses(
                &mut tape,
                &pair,
                &online,
                &target,
                true,
                true,
                &SolverConfig::default(),
                GradMode::Adjoint,
            )
            .unwrap();
            let total = tape.value(nodes.total).item().unwrap();
            assert!((0.0..=8.0).contains(&total), "total {total}");
        }
    }

    #[test]
    fn no_gradient_reaches_target_parameters() {
        let mut r = rng(31);
        let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
        let mut target = online.clone();
        let pair = pair_with(vec![0.1, 0.2, 0.3], vec![0.4, -0.2, 0.1]);

        let loss_with = |tgt: &ModelBundle| -> f64 {
            let mut tape = Tape::new(Precision::F64);
            let nodes = byol_losses(
                &mut tape,
                &pair,
                &online,
                tgt,
                true,
                true,
                &SolverConfig::default(),
                GradMode::Adjoint,
            )
            .unwrap();
            tape.value(nodes.total).item().unwrap()
        };
        let base = loss_with(&target);

        let mut tape = Tape::new(Precision::F64);
        let nodes = byol_losses(
            &mut tape,
            &pair,
            &online,
            &target,
            true,
            true,
            &SolverConfig::default(),
            GradMode::Adjoint,
        )
        .unwrap();
        let grads = tape.backward(nodes.total).unwrap();
        // Every gradient entry belongs to the online pipeline.
        for name in grads.params().keys() {
            assert!(
                name.starts_with("encoder") || name.starts_with("projector") || name.starts_with("field"),
                "unexpected gradient for {name}"
            );
        }

        // Perturbing the target changes the loss even though it gets no grads.
        for (_, t) in target.projector.net.named_params_mut("p") {
            t.data_mut()[0] += 0.01;
        }
        assert_ne!(base, loss_with(&target));
    }

    #[test]
    fn with_tc_false_disables_the_reverse_term() {
        let mut r = rng(37);
        let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
        let target = online.clone();
        let pair = pair_with(vec![0.1, 0.2, 0.3], vec![0.4, -0.2, 0.1]);
        let mut tape = Tape::new(Precision::F64);
        let nodes = byol_losses(
            &mut tape,
            &pair,
            &online,
            &target,
            true,
            false,
            &SolverConfig::default(),
            GradMode::Adjoint,
        )
        .unwrap();
        assert!(nodes.backward.is_none());
        assert_eq!(nodes.total, nodes.forward);
    }

    #[test]
    fn ema_scalar_arithmetic() {
        let mut online = identity_bundle(2);
        // Set one online weight to 0 and the matching target weight to 1.
        for (_, t) in online.encoder.net.named_params_mut("e") {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let mut pair = EmaPair::new(online, 0.9).unwrap();
        for (_, t) in pair.target.encoder.net.named_params_mut("e") {
            for v in t.data_mut() {
                *v = 1.0;
            }
        }
        ema_update(&mut pair).unwrap();
        let target_params = pair.target.encoder.net.named_params("e");
        assert!((target_params[0].1.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_freeze() {
        let mut r = rng(5);
        let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
        let mut pair = EmaPair::new(online, 0.95).unwrap();
        let before: Vec<f64> = pair
            .target
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        ema_update(&mut pair).unwrap();
        let after: Vec<f64> = pair
            .target
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, after, "target == online is a fixed point");

        // decay = 1 freezes the target regardless of online drift.
        pair.decay = 1.0;
        for (_, t) in pair.online.named_params_mut() {
            for v in t.data_mut() {
                *v += 1.0;
            }
        }
        ema_update(&mut pair).unwrap();
        let frozen: Vec<f64> = pair
            .target
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert_eq!(before, frozen);
    }

    #[test]
    fn ema_converges_geometrically_to_constant_online() {
        let mut online = identity_bundle(1);
        for (_, t) in online.named_params_mut() {
            for v in t.data_mut() {
                *v = 2.0;
            }
        }
        let mut pair = EmaPair::new(online, 0.9).unwrap();
        for (_, t) in pair.target.named_params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        for k in 1..=20 {
            ema_update(&mut pair).unwrap();
            let xi = pair.target.named_params()[0].1.data()[0];
            // xi_k = mu (1 - alpha^k) with mu = 2, alpha = 0.9.
            let expect = 2.0 * (1.0 - 0.9f64.powi(k));
            assert!((xi - expect).abs() < 1e-12, "k={k}: {xi} vs {expect}");
        }
    }

    fn tiny_cfg(scheme: Scheme) -> crate::config::ExperimentConfig {
        let mut cfg = crate::config::ExperimentConfig::default();
        cfg.scheme = scheme;
        cfg.cohort.n_patients = 6;
        cfg.cohort.obs_dim = 6;
        cfg.arch.encoder_hidden = vec![8];
        cfg.arch.repr_dim = 6;
        cfg.arch.latent_dim = 4;
        cfg.arch.field_hidden = vec![8];
        cfg.hyper.batch_size = 8;
        cfg.hyper.epochs_pretrain = 1;
        cfg.solver.rtol = 1e-4;
        cfg.solver.atol = 1e-6;
        cfg.seed = 12;
        cfg
    }

    fn tiny_pairs(cfg: &crate::config::ExperimentConfig) -> Vec<PairSample> {
        let cohort = crate::cohort::generate_cohort(&cfg.cohort, cfg.seed).unwrap();
        crate::cohort::build_pairs(&cohort)
    }

    #[test]
    fn zero_learning_rate_keeps_initial_weights() {
        let mut cfg = tiny_cfg(Scheme::ByolTetc);
        cfg.hyper.lr = 0.0;
        let pairs = tiny_pairs(&cfg);
        let out = pretrain(&pairs, &cfg).unwrap();
        assert!(out.divergence_cause.is_none());

        let init = ModelBundle::init_pretrain(
            cfg.cohort.obs_dim,
            &cfg.arch.encoder_hidden,
            cfg.arch.repr_dim,
            cfg.arch.latent_dim,
            &cfg.arch.field_hidden,
            &mut seeded(cfg.seed, STREAM_WEIGHTS),
        )
        .unwrap();
        for ((name_a, a), (name_b, b)) in out.bundle.named_params().iter().zip(init.named_params())
        {
            assert_eq!(name_a, &name_b);
            assert_eq!(a.data(), b.data(), "{name_a} changed under lr=0");
        }
    }

    #[test]
    fn first_epoch_losses_replay_from_the_seed() {
        // With lr = 0 the weights never move, so every recorded loss must
        // equal an independent recomputation that replays the shuffle and
        // batching streams on the frozen initial bundle.
        let mut cfg = tiny_cfg(Scheme::ByolTetc);
        cfg.hyper.lr = 0.0;
        let pairs = tiny_pairs(&cfg);
        let out = pretrain(&pairs, &cfg).unwrap();

        let init = ModelBundle::init_pretrain(
            cfg.cohort.obs_dim,
            &cfg.arch.encoder_hidden,
            cfg.arch.repr_dim,
            cfg.arch.latent_dim,
            &cfg.arch.field_hidden,
            &mut seeded(cfg.seed, STREAM_WEIGHTS),
        )
        .unwrap();
        let target = init.clone();
        let order = shuffled_indices(pairs.len(), &mut seeded(cfg.seed, STREAM_SHUFFLE));
        let mut row = 0;
        for chunk in order.chunks(cfg.hyper.batch_size) {
            let mut loss_sum = 0.0;
            for &i in chunk {
                let mut tape = Tape::new(cfg.precision);
                let nodes = byol_losses(
                    &mut tape,
                    &pairs[i],
                    &init,
                    &target,
                    cfg.shared_encoder,
                    cfg.with_tc,
                    &cfg.solver,
                    cfg.grad_mode,
                )
                .unwrap();
                loss_sum += tape.value(nodes.total).item().unwrap();
            }
            let want = loss_sum / chunk.len() as f64;
            let got = out.curve[row].loss;
            assert!((got - want).abs() < 1e-12, "row {row}: {got} vs {want}");
            row += 1;
        }
        assert_eq!(row, out.curve.len());
    }

    #[test]
    fn pretrain_is_deterministic_per_seed() {
        for scheme in [Scheme::ByolTetc, Scheme::SimclrDpa] {
            let cfg = tiny_cfg(scheme);
            let pairs = tiny_pairs(&cfg);
            let a = pretrain(&pairs, &cfg).unwrap();
            let b = pretrain(&pairs, &cfg).unwrap();
            assert_eq!(a.curve, b.curve, "{scheme:?}");
            for ((_, ta), (_, tb)) in a.bundle.named_params().iter().zip(b.bundle.named_params())
            {
                assert_eq!(ta.data(), tb.data());
            }
        }
    }

    #[test]
    fn simclr_pretraining_reduces_its_loss() {
        let mut cfg = tiny_cfg(Scheme::SimclrDpa);
        cfg.hyper.epochs_pretrain = 6;
        cfg.cohort.n_patients = 10;
        let pairs = tiny_pairs(&cfg);
        let out = pretrain(&pairs, &cfg).unwrap();
        assert!(out.divergence_cause.is_none());
        let first = out.curve.first().unwrap().loss;
        let last = out.curve.last().unwrap().loss;
        assert!(last < first, "loss did not improve: {first} -> {last}");
        assert!(out.stability.max_grad_norm > 0.0);
    }

    #[test]
    fn ema_shape_mismatch_is_a_contract_violation() {
        let mut r = rng(6);
        let online = ModelBundle::init_pretrain(3, &[4], 3, 2, &[5], &mut r).unwrap();
        let other = ModelBundle::init_pretrain(3, &[4], 3, 4, &[5], &mut r).unwrap();
        let mut pair = EmaPair {
            online,
            target: other,
            decay: 0.9,
        };
        assert!(matches!(ema_update(&mut pair), Err(Error::Contract(_))));
    }
}
