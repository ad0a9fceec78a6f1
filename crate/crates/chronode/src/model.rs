//! Time-aware heads: the latent vector field, the encoder/projector pair,
//! recurrent update cells, and the severity classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, NetLayout};
use crate::ode::{self, OdeField, SolverConfig};
use crate::tape::{GradMode, Tape, ValueId};
use crate::tensor::Tensor;

/// Number of severity grades (0..=4).
pub const GRADE_COUNT: usize = 5;

/// Latent dynamics `dh/dt = u(h, t)`: a dense net over `concat(h, t)` with
/// time appended as one scalar feature.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub net: DenseNet,
}

impl VectorField {
    /// Hidden layers use tanh; the output layer is linear.
    pub fn init<R: Rng>(latent_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut dims = vec![latent_dim + 1];
        dims.extend_from_slice(hidden);
        dims.push(latent_dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        Ok(VectorField {
            net: DenseNet::init(&dims, &acts, rng)?,
        })
    }

    pub fn from_net(net: DenseNet) -> Result<Self> {
        if net.in_dim() != net.out_dim() + 1 {
            return Err(Error::Contract(format!(
                "vector field needs in_dim == latent_dim + 1, got {} -> {}",
                net.in_dim(),
                net.out_dim()
            )));
        }
        Ok(VectorField { net })
    }

    pub fn latent_dim(&self) -> usize {
        self.net.out_dim()
    }

    /// Evaluate the field on a tape with the time point as a node, so
    /// gradients can flow into both state and time.
    pub fn eval_tape(
        &self,
        tape: &mut Tape,
        prefix: &str,
        h: ValueId,
        t: ValueId,
    ) -> Result<ValueId> {
        let x = tape.concat(&[h, t])?;
        self.net.forward_tape(tape, prefix, x)
    }

    /// Register the field's parameters on a tape for use by solve nodes.
    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> Result<FieldBinding> {
        let param_ids = self.net.bind(tape, prefix)?;
        Ok(FieldBinding {
            layout: self.net.layout(),
            param_ids,
        })
    }
}

impl OdeField for VectorField {
    fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor> {
        let mut data = Vec::with_capacity(h.len() + 1);
        data.extend_from_slice(h.data());
        data.push(t);
        self.net.forward(&Tensor::vector(data))
    }
}

/// A vector field whose parameters live on a tape. Solve nodes carry one of
/// these so the backward pass can rebuild the field from current values and
/// scatter parameter gradients back to the right nodes.
#[derive(Debug, Clone)]
pub struct FieldBinding {
    layout: NetLayout,
    param_ids: Vec<ValueId>,
}

impl FieldBinding {
    pub fn param_ids(&self) -> &[ValueId] {
        &self.param_ids
    }

    pub(crate) fn materialize(&self, tape: &Tape) -> Result<VectorField> {
        let params = self.param_ids.iter().map(|&id| tape.value(id).clone()).collect();
        VectorField::from_net(DenseNet::from_parts(&self.layout, params)?)
    }
}

/// Observation-vector encoder `x -> y` (the stand-in feature extractor).
#[derive(Debug, Clone)]
pub struct Encoder {
    pub net: DenseNet,
}

impl Encoder {
    pub fn init<R: Rng>(obs_dim: usize, hidden: &[usize], repr_dim: usize, rng: &mut R) -> Result<Self> {
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(repr_dim);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Identity);
        Ok(Encoder {
            net: DenseNet::init(&dims, &acts, rng)?,
        })
    }
}

/// Two-layer projector `y -> h` onto the latent space the field evolves.
#[derive(Debug, Clone)]
pub struct Projector {
    pub net: DenseNet,
}

impl Projector {
    pub fn init<R: Rng>(repr_dim: usize, latent_dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Projector {
            net: DenseNet::init(
                &[repr_dim, repr_dim, latent_dim],
                &[Activation::Tanh, Activation::Identity],
                rng,
            )?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    None,
    Rnn,
    Gru,
    Lstm,
}

/// Time-aware head family under comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    #[default]
    Node,
    NodeRnn,
    NodeGru,
    NodeLstm,
}

impl HeadKind {
    pub fn cell_kind(self) -> CellKind {
        match self {
            HeadKind::Node => CellKind::None,
            HeadKind::NodeRnn => CellKind::Rnn,
            HeadKind::NodeGru => CellKind::Gru,
            HeadKind::NodeLstm => CellKind::Lstm,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            HeadKind::Node => "NODE",
            HeadKind::NodeRnn => "NODE-RNN",
            HeadKind::NodeGru => "NODE-GRU",
            HeadKind::NodeLstm => "NODE-LSTM",
        }
    }
}

/// One gate's affine maps: `wx . x + wh . h + b`.
#[derive(Debug, Clone)]
struct Gate {
    name: &'static str,
    wx: Tensor, // [hidden, input]
    wh: Tensor, // [hidden, hidden]
    b: Tensor,  // [hidden]
}

/// Recurrent update cell applied at observation times during an ODE-RNN
/// rollout. Input and hidden dims both equal the latent dim.
#[derive(Debug, Clone)]
pub struct RecurrentCell {
    pub kind: CellKind,
    gates: Vec<Gate>,
}

/// Hidden state of a cell; `c` is present only for LSTM.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

/// Tape-resident version of [`CellState`].
#[derive(Debug, Clone, Copy)]
pub struct CellStateIds {
    pub h: ValueId,
    pub c: Option<ValueId>,
}

fn gate_names(kind: CellKind) -> &'static [&'static str] {
    match kind {
        CellKind::None => &[],
        CellKind::Rnn => &["h"],
        CellKind::Gru => &["z", "r", "n"],
        CellKind::Lstm => &["i", "f", "g", "o"],
    }
}

impl RecurrentCell {
    pub fn init<R: Rng>(kind: CellKind, dim: usize, rng: &mut R) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let gates = gate_names(kind)
            .iter()
            .map(|name| {
                Ok(Gate {
                    name,
                    wx: Tensor::matrix(dim, dim, sample(dim * dim))?,
                    wh: Tensor::matrix(dim, dim, sample(dim * dim))?,
                    b: Tensor::vector(sample(dim)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RecurrentCell { kind, gates })
    }

    pub fn dim(&self) -> Option<usize> {
        self.gates.first().map(|g| g.b.len())
    }

    pub fn initial_state(&self, h: Tensor) -> CellState {
        let c = match self.kind {
            CellKind::Lstm => Some(Tensor::zeros_like(&h)),
            _ => None,
        };
        CellState { h, c }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for g in &self.gates {
            out.push((format!("{prefix}.{}.wx", g.name), &g.wx));
            out.push((format!("{prefix}.{}.wh", g.name), &g.wh));
            out.push((format!("{prefix}.{}.b", g.name), &g.b));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for g in &mut self.gates {
            out.push((format!("{prefix}.{}.wx", g.name), &mut g.wx));
            out.push((format!("{prefix}.{}.wh", g.name), &mut g.wh));
            out.push((format!("{prefix}.{}.b", g.name), &mut g.b));
        }
        out
    }

    /// Force a named gate's bias so the sigmoid saturates at exactly 1.
    /// Intended for algebraic tests of the update equations.
    pub fn saturate_gate(&mut self, name: &str) {
        for g in &mut self.gates {
            if g.name == name {
                g.wx = Tensor::zeros_like(&g.wx);
                g.wh = Tensor::zeros_like(&g.wh);
                g.b = Tensor::from_vec(g.b.shape().to_vec(), vec![1000.0; g.b.len()]).unwrap();
            }
        }
    }

    fn gate(&self, name: &str) -> &Gate {
        self.gates.iter().find(|g| g.name == name).unwrap()
    }

    fn gate_pre(&self, name: &str, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        let g = self.gate(name);
        matvec(&g.wx, x)?.add(&matvec(&g.wh, h)?)?.add(&g.b)
    }

    /// Plain (untaped) cell update.
    pub fn step(&self, state: &CellState, x: &Tensor) -> Result<CellState> {
        match self.kind {
            CellKind::None => Ok(state.clone()),
            CellKind::Rnn => {
                let h = map(&self.gate_pre("h", x, &state.h)?, f64::tanh);
                Ok(CellState { h, c: None })
            }
            CellKind::Gru => {
                let z = map(&self.gate_pre("z", x, &state.h)?, sigmoid);
                let r = map(&self.gate_pre("r", x, &state.h)?, sigmoid);
                let rh = r.mul(&state.h)?;
                let n = map(&self.gate_pre("n", x, &rh)?, f64::tanh);
                // h' = (1 - z) * h + z * n
                let keep = map(&z, |v| 1.0 - v).mul(&state.h)?;
                let h = keep.add(&z.mul(&n)?)?;
                Ok(CellState { h, c: None })
            }
            CellKind::Lstm => {
                let c_prev = state.c.as_ref().ok_or_else(|| {
                    Error::Contract("lstm step requires a cell state".into())
                })?;
                let i = map(&self.gate_pre("i", x, &state.h)?, sigmoid);
                let f = map(&self.gate_pre("f", x, &state.h)?, sigmoid);
                let g = map(&self.gate_pre("g", x, &state.h)?, f64::tanh);
                let o = map(&self.gate_pre("o", x, &state.h)?, sigmoid);
                let c = f.mul(c_prev)?.add(&i.mul(&g)?)?;
                let h = o.mul(&map(&c, f64::tanh))?;
                Ok(CellState { h, c: Some(c) })
            }
        }
    }

    fn gate_pre_tape(
        &self,
        tape: &mut Tape,
        prefix: &str,
        name: &str,
        x: ValueId,
        h: ValueId,
    ) -> Result<ValueId> {
        let g = self.gate(name);
        let wx = tape.param(&format!("{prefix}.{name}.wx"), &g.wx)?;
        let wh = tape.param(&format!("{prefix}.{name}.wh"), &g.wh)?;
        let b = tape.param(&format!("{prefix}.{name}.b"), &g.b)?;
        let a = tape.matvec(wx, x)?;
        let c = tape.matvec(wh, h)?;
        let s = tape.add(a, c)?;
        tape.add(s, b)
    }

    /// Cell update recorded on a tape.
    pub fn step_tape(
        &self,
        tape: &mut Tape,
        prefix: &str,
        state: CellStateIds,
        x: ValueId,
    ) -> Result<CellStateIds> {
        match self.kind {
            CellKind::None => Ok(state),
            CellKind::Rnn => {
                let pre = self.gate_pre_tape(tape, prefix, "h", x, state.h)?;
                let h = tape.tanh(pre)?;
                Ok(CellStateIds { h, c: None })
            }
            CellKind::Gru => {
                let z_pre = self.gate_pre_tape(tape, prefix, "z", x, state.h)?;
                let z = tape.sigmoid(z_pre)?;
                let r_pre = self.gate_pre_tape(tape, prefix, "r", x, state.h)?;
                let r = tape.sigmoid(r_pre)?;
                let rh = tape.mul(r, state.h)?;
                let n_pre = self.gate_pre_tape(tape, prefix, "n", x, rh)?;
                let n = tape.tanh(n_pre)?;
                let one_minus_z = tape.affine(z, -1.0, 1.0)?;
                let keep = tape.mul(one_minus_z, state.h)?;
                let upd = tape.mul(z, n)?;
                let h = tape.add(keep, upd)?;
                Ok(CellStateIds { h, c: None })
            }
            CellKind::Lstm => {
                let c_prev = state
                    .c
                    .ok_or_else(|| Error::Contract("lstm step requires a cell state".into()))?;
                let i_pre = self.gate_pre_tape(tape, prefix, "i", x, state.h)?;
                let i = tape.sigmoid(i_pre)?;
                let f_pre = self.gate_pre_tape(tape, prefix, "f", x, state.h)?;
                let f = tape.sigmoid(f_pre)?;
                let g_pre = self.gate_pre_tape(tape, prefix, "g", x, state.h)?;
                let g = tape.tanh(g_pre)?;
                let o_pre = self.gate_pre_tape(tape, prefix, "o", x, state.h)?;
                let o = tape.sigmoid(o_pre)?;
                let fc = tape.mul(f, c_prev)?;
                let ig = tape.mul(i, g)?;
                let c = tape.add(fc, ig)?;
                let tc = tape.tanh(c)?;
                let h = tape.mul(o, tc)?;
                Ok(CellStateIds { h, c: Some(c) })
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::vector(t.data().iter().map(|&v| f(v)).collect())
}

fn matvec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (m, n) = (w.shape()[0], w.shape()[1]);
    if x.shape() != [n] {
        return Err(Error::ShapeMismatch {
            context: "matvec".into(),
            expected: vec![n],
            got: x.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m];
    for r in 0..m {
        out[r] = w.data()[r * n..(r + 1) * n]
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
    }
    Ok(Tensor::vector(out))
}

/// Evolve a latent from `t_i` to `t_target` along the field. Returns the
/// input unchanged when the horizon is empty.
pub fn predict_latent(
    h: &Tensor,
    t_i: f64,
    t_target: f64,
    field: &VectorField,
    cfg: &SolverConfig,
) -> Result<Tensor> {
    Ok(ode::ode_solve(h, field, t_i, t_target, cfg)?.h_end)
}

/// ODE-RNN rollout over an ordered visit sequence: the latent flows along
/// the field between observation times, and the cell ingests each new
/// observation (evolve-then-update). With `CellKind::None` the state is the
/// first visit's projected latent carried along the flow (plain NODE).
pub fn ode_rnn_rollout(
    visits: &[(f64, Tensor)],
    encoder: &Encoder,
    projector: &Projector,
    field: &VectorField,
    cell: &RecurrentCell,
    cfg: &SolverConfig,
) -> Result<Tensor> {
    if visits.is_empty() {
        return Err(Error::Contract("rollout requires at least one visit".into()));
    }
    if visits.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Contract("rollout requires strictly increasing visit times".into()));
    }
    let first = projector.net.forward(&encoder.net.forward(&visits[0].1)?)?;
    let mut state = cell.initial_state(first);
    let mut t_prev = visits[0].0;
    for (t, x) in &visits[1..] {
        state.h = predict_latent(&state.h, t_prev, *t, field, cfg)?;
        if cell.kind != CellKind::None {
            let latent = projector.net.forward(&encoder.net.forward(x)?)?;
            state = cell.step(&state, &latent)?;
        }
        t_prev = *t;
    }
    Ok(state.h)
}

/// Tape-recorded rollout; the returned id is the latent after the last visit.
#[allow(clippy::too_many_arguments)]
pub fn ode_rnn_rollout_tape(
    tape: &mut Tape,
    visits: &[(f64, Tensor)],
    encoder: &Encoder,
    projector: &Projector,
    field: &VectorField,
    cell: &RecurrentCell,
    cfg: &SolverConfig,
    mode: GradMode,
) -> Result<ValueId> {
    if visits.is_empty() {
        return Err(Error::Contract("rollout requires at least one visit".into()));
    }
    if visits.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::Contract("rollout requires strictly increasing visit times".into()));
    }
    let binding = field.bind(tape, "field")?;
    let x0 = tape.input(visits[0].1.clone())?;
    let y0 = encoder.net.forward_tape(tape, "encoder", x0)?;
    let h0 = projector.net.forward_tape(tape, "projector", y0)?;
    let mut state = CellStateIds {
        h: h0,
        c: match cell.kind {
            CellKind::Lstm => Some(tape.input(Tensor::zeros(vec![tape.value(h0).len()]))?),
            _ => None,
        },
    };
    let mut t_prev = visits[0].0;
    for (t, x) in &visits[1..] {
        state.h = tape.ode_solve(state.h, &binding, t_prev, *t, cfg, mode)?;
        if cell.kind != CellKind::None {
            let xi = tape.input(x.clone())?;
            let yi = encoder.net.forward_tape(tape, "encoder", xi)?;
            let latent = projector.net.forward_tape(tape, "projector", yi)?;
            state = cell.step_tape(tape, "cell", state, latent)?;
        }
        t_prev = *t;
    }
    Ok(state.h)
}

/// The full parameter set of one pipeline: encoder, projector, and field,
/// plus the recurrent cell and severity classifier when fine-tuning.
/// Parameter names are stable (`encoder.0.w`, `field.1.b`, `cell.z.wx`, ..)
/// and shared by tapes, optimizers, and checkpoints.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub projector: Projector,
    pub field: VectorField,
    pub cell: Option<RecurrentCell>,
    pub classifier: Option<DenseNet>,
}

impl ModelBundle {
    /// Initialize encoder, projector, and field (the pre-trainable part).
    pub fn init_pretrain<R: Rng>(
        obs_dim: usize,
        encoder_hidden: &[usize],
        repr_dim: usize,
        latent_dim: usize,
        field_hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ModelBundle {
            encoder: Encoder::init(obs_dim, encoder_hidden, repr_dim, rng)?,
            projector: Projector::init(repr_dim, latent_dim, rng)?,
            field: VectorField::init(latent_dim, field_hidden, rng)?,
            cell: None,
            classifier: None,
        })
    }

    /// Add a head-specific cell and a grade classifier for fine-tuning.
    pub fn attach_head<R: Rng>(
        &mut self,
        head: HeadKind,
        classifier_hidden: &[usize],
        rng: &mut R,
    ) -> Result<()> {
        let latent = self.field.latent_dim();
        self.cell = Some(RecurrentCell::init(head.cell_kind(), latent, rng)?);
        let mut dims = vec![latent];
        dims.extend_from_slice(classifier_hidden);
        dims.push(GRADE_COUNT);
        let mut acts = vec![Activation::Tanh; classifier_hidden.len()];
        acts.push(Activation::Identity);
        self.classifier = Some(DenseNet::init(&dims, &acts, rng)?);
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.field.latent_dim()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.encoder.net.named_params("encoder");
        out.extend(self.projector.net.named_params("projector"));
        out.extend(self.field.net.named_params("field"));
        if let Some(cell) = &self.cell {
            out.extend(cell.named_params("cell"));
        }
        if let Some(head) = &self.classifier {
            out.extend(head.named_params("classifier"));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.encoder.net.named_params_mut("encoder");
        out.extend(self.projector.net.named_params_mut("projector"));
        out.extend(self.field.net.named_params_mut("field"));
        if let Some(cell) = &mut self.cell {
            out.extend(cell.named_params_mut("cell"));
        }
        if let Some(head) = &mut self.classifier {
            out.extend(head.named_params_mut("classifier"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Output of the severity classifier for one latent.
#[derive(Debug, Clone)]
pub struct Classification {
    pub logits: Tensor,
    pub probs: Vec<f64>,
    /// `P(grade >= k)` for k in {1, 2, 3}, from softmax tail sums.
    pub tail_scores: [f64; 3],
    pub pred_grade: u8,
}

/// Classify a latent into severity-grade logits and binarized tail scores.
pub fn classify(h: &Tensor, head: &DenseNet) -> Result<Classification> {
    let logits = head.forward(h)?;
    if logits.len() != GRADE_COUNT {
        return Err(Error::Contract(format!(
            "classifier must emit {GRADE_COUNT} logits, got {}",
            logits.len()
        )));
    }
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();
    let tail_scores = [
        probs[1..].iter().sum::<f64>(),
        probs[2..].iter().sum::<f64>(),
        probs[3..].iter().sum::<f64>(),
    ];
    let pred = probs
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u8)
        .unwrap();
    Ok(Classification {
        logits,
        probs,
        tail_scores,
        pred_grade: pred,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ode::Method;
    use crate::tensor::Precision;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_models(rng: &mut ChaCha8Rng) -> (Encoder, Projector, VectorField) {
        let encoder = Encoder::init(4, &[6], 5, rng).unwrap();
        let projector = Projector::init(5, 3, rng).unwrap();
        let field = VectorField::init(3, &[8], rng).unwrap();
        (encoder, projector, field)
    }

    fn zero_field(latent: usize) -> VectorField {
        let layout = NetLayout {
            dims: vec![latent + 1, latent],
            activations: vec![Activation::Identity],
        };
        VectorField::from_net(
            DenseNet::from_parts(
                &layout,
                vec![
                    Tensor::zeros(vec![latent, latent + 1]),
                    Tensor::zeros(vec![latent]),
                ],
            )
            .unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn predict_latent_identity_on_empty_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let field = VectorField::init(3, &[8], &mut rng).unwrap();
        let h = Tensor::vector(vec![0.2, -0.4, 0.6]);
        let out = predict_latent(&h, 1.5, 1.5, &field, &SolverConfig::default()).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn zero_field_keeps_latent_for_any_horizon() {
        let field = zero_field(3);
        let h = Tensor::vector(vec![0.3, 0.0, -1.2]);
        let out = predict_latent(&h, 0.0, 5.0, &field, &SolverConfig::default()).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn linear_scalar_field_matches_exponential() {
        // u(h, t) = h via weight [[1, 0]] on concat(h, t).
        let layout = NetLayout {
            dims: vec![2, 1],
            activations: vec![Activation::Identity],
        };
        let field = VectorField::from_net(
            DenseNet::from_parts(
                &layout,
                vec![
                    Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
                    Tensor::vector(vec![0.0]),
                ],
            )
            .unwrap(),
        )
        .unwrap();
        let out = predict_latent(&Tensor::scalar(1.0), 0.0, 1.0, &field, &SolverConfig::default())
            .unwrap();
        assert!((out.data()[0] - std::f64::consts::E).abs() < 1e-4);
    }

    #[test]
    fn rollout_single_visit_is_projected_encoding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (encoder, projector, field) = small_models(&mut rng);
        let cell = RecurrentCell::init(CellKind::None, 3, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]);
        let direct = projector.net.forward(&encoder.net.forward(&x).unwrap()).unwrap();
        let rolled = ode_rnn_rollout(
            &[(0.7, x)],
            &encoder,
            &projector,
            &field,
            &cell,
            &SolverConfig::default(),
        )
        .unwrap();
        assert_eq!(rolled, direct);
    }

    #[test]
    fn rollout_rejects_non_monotone_times() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (encoder, projector, field) = small_models(&mut rng);
        let cell = RecurrentCell::init(CellKind::Rnn, 3, &mut rng).unwrap();
        let x = Tensor::vector(vec![0.0; 4]);
        let err = ode_rnn_rollout(
            &[(1.0, x.clone()), (1.0, x)],
            &encoder,
            &projector,
            &field,
            &cell,
            &SolverConfig::default(),
        );
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn gru_with_saturated_update_gate_takes_candidate_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (encoder, projector, _) = small_models(&mut rng);
        let field = zero_field(3);
        let mut cell = RecurrentCell::init(CellKind::Gru, 3, &mut rng).unwrap();
        cell.saturate_gate("z");

        let x0 = Tensor::vector(vec![0.1, -0.2, 0.3, 0.0]);
        let x1 = Tensor::vector(vec![0.5, 0.4, -0.1, 0.2]);
        let rolled = ode_rnn_rollout(
            &[(0.0, x0.clone()), (1.0, x1.clone())],
            &encoder,
            &projector,
            &field,
            &cell,
            &SolverConfig::default(),
        )
        .unwrap();

        // Hand-rolled trace: zero field leaves h0; z == 1 so h' == candidate n.
        let h0 = projector.net.forward(&encoder.net.forward(&x0).unwrap()).unwrap();
        let lat1 = projector.net.forward(&encoder.net.forward(&x1).unwrap()).unwrap();
        let r = map(&cell.gate_pre("r", &lat1, &h0).unwrap(), sigmoid);
        let rh = r.mul(&h0).unwrap();
        let candidate = map(&cell.gate_pre("n", &lat1, &rh).unwrap(), f64::tanh);
        for (a, b) in rolled.data().iter().zip(candidate.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_rollout_runs_and_tracks_cell_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (encoder, projector, field) = small_models(&mut rng);
        let cell = RecurrentCell::init(CellKind::Lstm, 3, &mut rng).unwrap();
        let visits: Vec<(f64, Tensor)> = (0..3)
            .map(|i| (i as f64 * 0.8, Tensor::vector(vec![0.1 * i as f64; 4])))
            .collect();
        let out = ode_rnn_rollout(
            &visits,
            &encoder,
            &projector,
            &field,
            &cell,
            &SolverConfig::default(),
        )
        .unwrap();
        assert!(out.is_finite());
        assert_eq!(out.len(), 3);
    }

    #[test]
    fn tape_rollout_matches_plain_rollout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (encoder, projector, field) = small_models(&mut rng);
        for kind in [CellKind::None, CellKind::Rnn, CellKind::Gru, CellKind::Lstm] {
            let cell = RecurrentCell::init(kind, 3, &mut rng).unwrap();
            let visits: Vec<(f64, Tensor)> = (0..3)
                .map(|i| {
                    (
                        i as f64 * 0.5,
                        Tensor::vector(vec![0.05 * (i + 1) as f64, -0.1, 0.2, 0.02]),
                    )
                })
                .collect();
            let cfg = SolverConfig {
                method: Method::Rk4,
                fixed_step_count: 8,
                ..SolverConfig::default()
            };
            let plain =
                ode_rnn_rollout(&visits, &encoder, &projector, &field, &cell, &cfg).unwrap();
            let mut tape = Tape::new(Precision::F64);
            let id = ode_rnn_rollout_tape(
                &mut tape,
                &visits,
                &encoder,
                &projector,
                &field,
                &cell,
                &cfg,
                GradMode::ThroughSolver,
            )
            .unwrap();
            for (a, b) in tape.value(id).data().iter().zip(plain.data()) {
                assert!((a - b).abs() < 1e-12, "cell {kind:?}");
            }
        }
    }

    #[test]
    fn flow_property_composes_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let field = VectorField::init(3, &[12], &mut rng).unwrap();
        let cfg = SolverConfig::default();
        let h = Tensor::vector(vec![0.4, -0.3, 0.1]);
        let via_mid = {
            let h1 = predict_latent(&h, 0.0, 0.9, &field, &cfg).unwrap();
            predict_latent(&h1, 0.9, 2.0, &field, &cfg).unwrap()
        };
        let direct = predict_latent(&h, 0.0, 2.0, &field, &cfg).unwrap();
        let diff = via_mid.sub(&direct).unwrap().norm();
        assert!(diff < 1e-3, "semigroup violation {diff}");
    }

    fn uniform_head() -> DenseNet {
        DenseNet::from_parts(
            &NetLayout {
                dims: vec![2, GRADE_COUNT],
                activations: vec![Activation::Identity],
            },
            vec![
                Tensor::zeros(vec![GRADE_COUNT, 2]),
                Tensor::zeros(vec![GRADE_COUNT]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn uniform_logits_give_tail_fractions() {
        let head = uniform_head();
        let c = classify(&Tensor::vector(vec![0.0, 0.0]), &head).unwrap();
        for (k, score) in c.tail_scores.iter().enumerate() {
            let expected = (GRADE_COUNT - (k + 1)) as f64 / GRADE_COUNT as f64;
            assert!((score - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_grade_four_saturates_all_tails() {
        let mut head = uniform_head();
        // Bias pushes all mass onto grade 4.
        head.set_param_tensors(vec![
            Tensor::zeros(vec![GRADE_COUNT, 2]),
            Tensor::vector(vec![0.0, 0.0, 0.0, 0.0, 500.0]),
        ])
        .unwrap();
        let c = classify(&Tensor::vector(vec![0.0, 0.0]), &head).unwrap();
        for score in c.tail_scores {
            assert!((score - 1.0).abs() < 1e-12);
        }
        assert_eq!(c.pred_grade, 4);
    }

    #[test]
    fn ln2_logit_fixture_matches_softmax_tails() {
        let mut head = uniform_head();
        head.set_param_tensors(vec![
            Tensor::zeros(vec![GRADE_COUNT, 2]),
            Tensor::vector(vec![0.0, 0.0, 2.0f64.ln(), 0.0, 0.0]),
        ])
        .unwrap();
        let c = classify(&Tensor::vector(vec![0.0, 0.0]), &head).unwrap();
        // softmax = [1,1,2,1,1]/6
        assert!((c.tail_scores[0] - 5.0 / 6.0).abs() < 1e-12);
        assert!((c.tail_scores[1] - 4.0 / 6.0).abs() < 1e-12);
        assert!((c.tail_scores[2] - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn tail_scores_are_monotone_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let head = DenseNet::init(&[3, GRADE_COUNT], &[Activation::Identity], &mut rng).unwrap();
        for i in 0..20 {
            let h = Tensor::vector(vec![
                (i as f64 * 0.37).sin(),
                (i as f64 * 0.71).cos(),
                0.1 * i as f64,
            ]);
            let c = classify(&h, &head).unwrap();
            assert!(c.tail_scores[0] >= c.tail_scores[1]);
            assert!(c.tail_scores[1] >= c.tail_scores[2]);
        }
    }
}
