//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Operations are recorded eagerly: each call computes the forward value,
//! checks it is finite, and appends a node. A backward sweep propagates
//! cotangents from a scalar loss (or explicit seeds) to every reachable
//! parameter. The op set is deliberately small; everything in this crate
//! (encoders, recurrent cells, contrastive and consistency losses) is
//! expressed through it.
//!
//! ODE solves participate as single nodes: the forward pass runs the
//! configured integrator, and the backward pass routes the cotangent through
//! either the adjoint sensitivity method or exact backprop through the
//! fixed-step discretization (see [`GradMode`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adjoint;
use crate::error::{Error, Result};
use crate::model::FieldBinding;
use crate::ode::{self, Method, SolverConfig};
use crate::tensor::{Precision, Tensor};

/// Index of a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// How the backward pass of an ODE-solve node computes gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// Integrate the augmented adjoint system backward in time.
    #[default]
    Adjoint,
    /// Backpropagate through the recorded fixed-step RK4 discretization.
    ThroughSolver,
}

#[derive(Debug, Clone)]
struct SolveRecord {
    h0: ValueId,
    binding: FieldBinding,
    t0: f64,
    t1: f64,
    cfg: SolverConfig,
    mode: GradMode,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param,
    Add(ValueId, ValueId),
    Mul(ValueId, ValueId),
    /// scalar * tensor, with the scalar a one-element node.
    MulScalar(ValueId, ValueId),
    /// matrix [m, n] times vector [n].
    MatVec(ValueId, ValueId),
    Tanh(ValueId),
    Sigmoid(ValueId),
    /// a * x + b, elementwise with constant coefficients.
    Affine(ValueId, f64, f64),
    Concat(Vec<ValueId>),
    Sum(ValueId),
    Mean(ValueId),
    L2Normalize(ValueId),
    LogSoftmax(ValueId),
    OdeSolve(Box<SolveRecord>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of primitive operations with cached forward values.
///
/// A tape is single-writer: one training step owns one tape. Parameters are
/// registered by name and deduplicated, so repeated use of the same weight
/// accumulates gradient contributions into a single entry.
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, ValueId>,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Cached forward value of a node.
    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, context: &str) -> Result<ValueId> {
        value.check_finite(context)?;
        let value = value.quantized(self.precision);
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { op, value });
        Ok(id)
    }

    /// Record a leaf value. Leaves are differentiable; their cotangent can be
    /// read back with [`Gradients::at`].
    pub fn input(&mut self, value: Tensor) -> Result<ValueId> {
        self.push(Op::Input, value, "input")
    }

    /// Register a named parameter leaf. Registering the same name twice
    /// returns the existing node so gradient contributions accumulate.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Result<ValueId> {
        if let Some(&id) = self.params.get(name) {
            if self.nodes[id.0].value.shape() != value.shape() {
                return Err(Error::ShapeMismatch {
                    context: format!("param {name} re-registered"),
                    expected: self.nodes[id.0].value.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            return Ok(id);
        }
        let id = self.push(Op::Param, value.clone(), "param")?;
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary_shapes(&self, a: ValueId, b: ValueId, context: &str) -> Result<()> {
        if self.nodes[a.0].value.same_shape(&self.nodes[b.0].value) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                context: context.into(),
                expected: self.nodes[a.0].value.shape().to_vec(),
                got: self.nodes[b.0].value.shape().to_vec(),
            })
        }
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_shapes(a, b, "add")?;
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        self.push(Op::Add(a, b), value, "add")
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_shapes(a, b, "mul")?;
        let value = self.nodes[a.0].value.mul(&self.nodes[b.0].value)?;
        self.push(Op::Mul(a, b), value, "mul")
    }

    /// Multiply a tensor by a scalar node.
    pub fn mul_scalar(&mut self, scalar: ValueId, tensor: ValueId) -> Result<ValueId> {
        let s = self.nodes[scalar.0].value.item()?;
        let value = self.nodes[tensor.0].value.scale(s);
        self.push(Op::MulScalar(scalar, tensor), value, "mul_scalar")
    }

    pub fn matvec(&mut self, matrix: ValueId, x: ValueId) -> Result<ValueId> {
        let w = &self.nodes[matrix.0].value;
        let v = &self.nodes[x.0].value;
        if w.shape().len() != 2 || v.shape().len() != 1 || w.shape()[1] != v.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "matvec".into(),
                expected: w.shape().to_vec(),
                got: v.shape().to_vec(),
            });
        }
        let (m, n) = (w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &w.data()[r * n..(r + 1) * n];
            out[r] = row.iter().zip(v.data()).map(|(a, b)| a * b).sum();
        }
        self.push(Op::MatVec(matrix, x), Tensor::vector(out), "matvec")
    }

    pub fn tanh(&mut self, x: ValueId) -> Result<ValueId> {
        let value = Tensor::vector(self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect());
        self.push(Op::Tanh(x), value, "tanh")
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        let value = Tensor::vector(
            self.nodes[x.0]
                .value
                .data()
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        );
        self.push(Op::Sigmoid(x), value, "sigmoid")
    }

    /// Elementwise `a * x + b` with constant coefficients.
    pub fn affine(&mut self, x: ValueId, a: f64, b: f64) -> Result<ValueId> {
        let value = Tensor::vector(self.nodes[x.0].value.data().iter().map(|v| a * v + b).collect());
        self.push(Op::Affine(x, a, b), value, "affine")
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let neg = self.affine(b, -1.0, 0.0)?;
        self.add(a, neg)
    }

    pub fn concat(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data), "concat")
    }

    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let value = Tensor::scalar(self.nodes[x.0].value.data().iter().sum());
        self.push(Op::Sum(x), value, "sum")
    }

    pub fn mean(&mut self, x: ValueId) -> Result<ValueId> {
        let v = &self.nodes[x.0].value;
        if v.is_empty() {
            return Err(Error::Contract("mean of an empty tensor".into()));
        }
        let value = Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64);
        self.push(Op::Mean(x), value, "mean")
    }

    /// Inner product of two same-shape tensors, as a scalar node.
    pub fn dot(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    pub fn l2_normalize(&mut self, x: ValueId) -> Result<ValueId> {
        let v = &self.nodes[x.0].value;
        let norm = v.norm();
        if norm == 0.0 {
            return Err(Error::ZeroNorm);
        }
        let value = Tensor::vector(v.data().iter().map(|a| a / norm).collect());
        self.push(Op::L2Normalize(x), value, "l2_normalize")
    }

    pub fn log_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let v = self.nodes[x.0].value.data();
        if v.is_empty() {
            return Err(Error::Contract("log_softmax of an empty tensor".into()));
        }
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
        let value = Tensor::vector(v.iter().map(|a| a - lse).collect());
        self.push(Op::LogSoftmax(x), value, "log_softmax")
    }

    /// Record an ODE solve from `t0` to `t1` as a single differentiable node.
    ///
    /// `ThroughSolver` mode requires a fixed-step RK4 config so the forward
    /// value and the backward discretization coincide.
    pub fn ode_solve(
        &mut self,
        h0: ValueId,
        binding: &FieldBinding,
        t0: f64,
        t1: f64,
        cfg: &SolverConfig,
        mode: GradMode,
    ) -> Result<ValueId> {
        if mode == GradMode::ThroughSolver && cfg.method != Method::Rk4 {
            return Err(Error::Contract(
                "ThroughSolver gradients are only defined for the rk4 method".into(),
            ));
        }
        let field = binding.materialize(self)?;
        let result = ode::ode_solve(&self.nodes[h0.0].value, &field, t0, t1, cfg)?;
        let record = SolveRecord {
            h0,
            binding: binding.clone(),
            t0,
            t1,
            cfg: cfg.clone(),
            mode,
        };
        self.push(Op::OdeSolve(Box::new(record)), result.h_end, "ode_solve")
    }

    /// Backward pass from a scalar loss node.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backward pass from explicit cotangent seeds. Each seed must match its
    /// node's shape; seeds on the same node accumulate.
    pub fn backward_seeded(&self, seeds: &[(ValueId, Tensor)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        for (id, seed) in seeds {
            if !seed.same_shape(&self.nodes[id.0].value) {
                return Err(Error::ShapeMismatch {
                    context: "backward seed".into(),
                    expected: self.nodes[id.0].value.shape().to_vec(),
                    got: seed.shape().to_vec(),
                });
            }
            accumulate(&mut grads, *id, seed.clone())?;
        }

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(&self.nodes[b.0].value)?;
                    let db = g.mul(&self.nodes[a.0].value)?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::MulScalar(s, t) => {
                    let sv = self.nodes[s.0].value.item()?;
                    let ds = Tensor::scalar(g.dot(&self.nodes[t.0].value)?);
                    let dt = g.scale(sv);
                    accumulate(&mut grads, *s, ds)?;
                    accumulate(&mut grads, *t, dt)?;
                }
                Op::MatVec(w, x) => {
                    let wt = &self.nodes[w.0].value;
                    let xt = &self.nodes[x.0].value;
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    let mut dw = vec![0.0; m * n];
                    let mut dx = vec![0.0; n];
                    for r in 0..m {
                        let gr = g.data()[r];
                        for c in 0..n {
                            dw[r * n + c] = gr * xt.data()[c];
                            dx[c] += wt.data()[r * n + c] * gr;
                        }
                    }
                    accumulate(&mut grads, *w, Tensor::from_vec(vec![m, n], dw)?)?;
                    accumulate(&mut grads, *x, Tensor::vector(dx))?;
                }
                Op::Tanh(x) => {
                    let y = &self.nodes[i].value;
                    let dx = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gi, yi)| gi * (1.0 - yi * yi))
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Sigmoid(x) => {
                    let y = &self.nodes[i].value;
                    let dx = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gi, yi)| gi * yi * (1.0 - yi))
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Affine(x, a, _) => {
                    accumulate(&mut grads, *x, g.scale(*a))?;
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        let slice = Tensor::vector(g.data()[offset..offset + len].to_vec());
                        accumulate(&mut grads, p, slice)?;
                        offset += len;
                    }
                }
                Op::Sum(x) => {
                    let gv = g.item()?;
                    let n = self.nodes[x.0].value.len();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.nodes[x.0].value.shape().to_vec(), vec![gv; n])?,
                    )?;
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let gv = g.item()? / n as f64;
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_vec(self.nodes[x.0].value.shape().to_vec(), vec![gv; n])?,
                    )?;
                }
                Op::L2Normalize(x) => {
                    let y = &self.nodes[i].value;
                    let norm = self.nodes[x.0].value.norm();
                    let gy = g.dot(y)?;
                    let dx = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gi, yi)| (gi - yi * gy) / norm)
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LogSoftmax(x) => {
                    let y = &self.nodes[i].value;
                    let gsum: f64 = g.data().iter().sum();
                    let dx = Tensor::vector(
                        g.data()
                            .iter()
                            .zip(y.data())
                            .map(|(gi, yi)| gi - yi.exp() * gsum)
                            .collect(),
                    );
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::OdeSolve(record) => {
                    let field = record.binding.materialize(self)?;
                    let h0_value = &self.nodes[record.h0.0].value;
                    let sg = match record.mode {
                        GradMode::Adjoint => adjoint::grad_adjoint(
                            h0_value,
                            &field,
                            record.t0,
                            record.t1,
                            &g,
                            &record.cfg,
                        )?,
                        GradMode::ThroughSolver => adjoint::grad_through_solver(
                            h0_value,
                            &field,
                            record.t0,
                            record.t1,
                            &g,
                            &record.cfg,
                        )?,
                    };
                    accumulate(&mut grads, record.h0, sg.d_h0)?;
                    for (&pid, dtheta) in record.binding.param_ids().iter().zip(sg.d_theta) {
                        accumulate(&mut grads, pid, dtheta)?;
                    }
                }
            }
        }

        let mut params = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = grads[id.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros_like(&self.nodes[id.0].value));
            params.insert(name.clone(), g.quantized(self.precision));
        }
        Ok(Gradients {
            node_grads: grads,
            params,
        })
    }

    /// Re-evaluate every node's forward value from its parents, in place.
    /// Re-running on an unchanged tape reproduces the cached values exactly.
    pub fn recompute_forward(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            let value = match &self.nodes[i].op {
                Op::Input | Op::Param => continue,
                Op::Add(a, b) => self.nodes[a.0].value.add(&self.nodes[b.0].value)?,
                Op::Mul(a, b) => self.nodes[a.0].value.mul(&self.nodes[b.0].value)?,
                Op::MulScalar(s, t) => {
                    let sv = self.nodes[s.0].value.item()?;
                    self.nodes[t.0].value.scale(sv)
                }
                Op::MatVec(w, x) => {
                    let wt = &self.nodes[w.0].value;
                    let xt = &self.nodes[x.0].value;
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    let mut out = vec![0.0; m];
                    for r in 0..m {
                        let row = &wt.data()[r * n..(r + 1) * n];
                        out[r] = row.iter().zip(xt.data()).map(|(a, b)| a * b).sum();
                    }
                    Tensor::vector(out)
                }
                Op::Tanh(x) => {
                    Tensor::vector(self.nodes[x.0].value.data().iter().map(|v| v.tanh()).collect())
                }
                Op::Sigmoid(x) => Tensor::vector(
                    self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|v| 1.0 / (1.0 + (-v).exp()))
                        .collect(),
                ),
                Op::Affine(x, a, b) => Tensor::vector(
                    self.nodes[x.0].value.data().iter().map(|v| a * v + b).collect(),
                ),
                Op::Concat(parts) => {
                    let mut data = Vec::new();
                    for &p in parts {
                        data.extend_from_slice(self.nodes[p.0].value.data());
                    }
                    Tensor::vector(data)
                }
                Op::Sum(x) => Tensor::scalar(self.nodes[x.0].value.data().iter().sum()),
                Op::Mean(x) => {
                    let v = &self.nodes[x.0].value;
                    Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64)
                }
                Op::L2Normalize(x) => {
                    let v = &self.nodes[x.0].value;
                    let norm = v.norm();
                    if norm == 0.0 {
                        return Err(Error::ZeroNorm);
                    }
                    Tensor::vector(v.data().iter().map(|a| a / norm).collect())
                }
                Op::LogSoftmax(x) => {
                    let v = self.nodes[x.0].value.data();
                    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
                    Tensor::vector(v.iter().map(|a| a - lse).collect())
                }
                Op::OdeSolve(record) => {
                    let field = record.binding.materialize(self)?;
                    ode::ode_solve(
                        &self.nodes[record.h0.0].value,
                        &field,
                        record.t0,
                        record.t1,
                        &record.cfg,
                    )?
                    .h_end
                }
            };
            value.check_finite("recompute_forward")?;
            self.nodes[i].value = value.quantized(self.precision);
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: ValueId, delta: Tensor) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.axpy(&delta, 1.0)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

/// Result of a backward pass: cotangents per node plus the gradient map over
/// every registered parameter (zero for parameters the loss does not reach).
pub struct Gradients {
    node_grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Cotangent at an arbitrary node, if the loss reaches it.
    pub fn at(&self, id: ValueId) -> Option<&Tensor> {
        self.node_grads[id.0].as_ref()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor> {
        self.params
    }
}
