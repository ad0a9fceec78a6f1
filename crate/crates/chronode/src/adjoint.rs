//! Gradients of ODE-solve endpoints with respect to the initial state, the
//! field parameters, and the integration times.
//!
//! Two independent routes are provided and cross-check each other:
//!
//! * [`grad_adjoint`] integrates the augmented system `(h, a, g)` backward
//!   in time with `da/dt = -a^T du/dh` and `dg/dt = -a^T du/dtheta`.
//! * [`grad_through_solver`] replays a fixed-step RK4 discretization on a
//!   tape and backpropagates through it, giving the exact gradient of the
//!   discrete map (including its dependence on `t0` and `t1`).
//!
//! Vector-Jacobian products of the field are taken by taping a single field
//! evaluation and running one backward pass, so any dense field plugs in.

use crate::error::{Error, Result};
use crate::model::VectorField;
use crate::ode::{self, Method, OdeField, SolverConfig};
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// Backward tolerances are tightened by this factor relative to the forward
/// solve; looser settings fail the oracle agreement suite.
const BACKWARD_TIGHTENING: f64 = 10.0;

/// Gradients of a loss through one solve endpoint.
#[derive(Debug, Clone)]
pub struct SolveGradients {
    pub d_h0: Tensor,
    /// Per field parameter, in `w0, b0, w1, b1, ..` order.
    pub d_theta: Vec<Tensor>,
    pub d_t0: f64,
    pub d_t1: f64,
}

/// Augmented state layout: `[h (n) | a (n) | g (p)]`.
struct AugmentedField<'a> {
    field: &'a VectorField,
    n: usize,
    param_shapes: Vec<Vec<usize>>,
    p: usize,
}

impl<'a> AugmentedField<'a> {
    fn new(field: &'a VectorField, n: usize) -> Self {
        let param_shapes: Vec<Vec<usize>> = field
            .net
            .param_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        let p = param_shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        AugmentedField {
            field,
            n,
            param_shapes,
            p,
        }
    }

    /// One taped field evaluation plus one backward pass seeded with `a`,
    /// yielding `u`, `a^T du/dh`, and `a^T du/dtheta` together.
    fn vjp(&self, h: &Tensor, a: &Tensor, t: f64) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let mut tape = Tape::new(Precision::F64);
        let h_id = tape.input(h.clone())?;
        let t_id = tape.input(Tensor::scalar(t))?;
        let u_id = self.field.eval_tape(&mut tape, "field", h_id, t_id)?;
        let u = tape.value(u_id).clone();
        let a_id = tape.input(a.clone())?;
        let s = tape.dot(u_id, a_id)?;
        let grads = tape.backward(s)?;
        let a_du_dh = grads
            .at(h_id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(vec![self.n]));
        let mut a_du_dtheta = Vec::with_capacity(self.p);
        for i in 0..self.param_shapes.len() {
            let name = if i % 2 == 0 {
                format!("field.{}.w", i / 2)
            } else {
                format!("field.{}.b", i / 2)
            };
            let g = grads.param(&name).expect("bound field parameter");
            a_du_dtheta.extend_from_slice(g.data());
        }
        Ok((u, a_du_dh, a_du_dtheta))
    }
}

impl OdeField for AugmentedField<'_> {
    fn eval(&self, z: &Tensor, t: f64) -> Result<Tensor> {
        let h = Tensor::vector(z.data()[..self.n].to_vec());
        let a = Tensor::vector(z.data()[self.n..2 * self.n].to_vec());
        let (u, a_du_dh, a_du_dtheta) = self.vjp(&h, &a, t)?;
        let mut dz = Vec::with_capacity(2 * self.n + self.p);
        dz.extend_from_slice(u.data());
        dz.extend(a_du_dh.data().iter().map(|v| -v));
        dz.extend(a_du_dtheta.iter().map(|v| -v));
        Ok(Tensor::vector(dz))
    }
}

fn unflatten(flat: &[f64], shapes: &[Vec<usize>]) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut offset = 0;
    for shape in shapes {
        let len: usize = shape.iter().product();
        out.push(Tensor::from_vec(shape.clone(), flat[offset..offset + len].to_vec()).unwrap());
        offset += len;
    }
    out
}

/// Adjoint sensitivity gradients of `L` through `h_end = odesolve(h0, t0 -> t1)`
/// given the upstream cotangent `dL/dh_end`.
pub fn grad_adjoint(
    h0: &Tensor,
    field: &VectorField,
    t0: f64,
    t1: f64,
    d_l_d_h_end: &Tensor,
    cfg: &SolverConfig,
) -> Result<SolveGradients> {
    let n = field.latent_dim();
    if h0.shape() != [n] || d_l_d_h_end.shape() != [n] {
        return Err(Error::ShapeMismatch {
            context: "grad_adjoint".into(),
            expected: vec![n],
            got: h0.shape().to_vec(),
        });
    }
    d_l_d_h_end.check_finite("grad_adjoint upstream gradient")?;

    let forward = ode::ode_solve(h0, field, t0, t1, cfg)?;
    let aug = AugmentedField::new(field, n);

    // d L / d t1 = dL/dh_end . u(h(t1), t1)
    let u_end = field.eval(&forward.h_end, t1)?;
    let d_t1 = d_l_d_h_end.dot(&u_end)?;

    if t0 == t1 {
        let zeros = field
            .net
            .param_tensors()
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        let u0 = field.eval(h0, t0)?;
        return Ok(SolveGradients {
            d_h0: d_l_d_h_end.clone(),
            d_theta: zeros,
            d_t0: -d_l_d_h_end.dot(&u0)?,
            d_t1,
        });
    }

    let mut z1 = Vec::with_capacity(2 * n + aug.p);
    z1.extend_from_slice(forward.h_end.data());
    z1.extend_from_slice(d_l_d_h_end.data());
    z1.extend(std::iter::repeat(0.0).take(aug.p));

    let back_cfg = cfg.tightened(BACKWARD_TIGHTENING);
    let backward = ode::ode_solve(&Tensor::vector(z1), &aug, t1, t0, &back_cfg)?;

    let z0 = backward.h_end.data();
    let d_h0 = Tensor::vector(z0[n..2 * n].to_vec());
    let shapes: Vec<Vec<usize>> = field
        .net
        .param_tensors()
        .iter()
        .map(|t| t.shape().to_vec())
        .collect();
    let d_theta = unflatten(&z0[2 * n..], &shapes);

    // d L / d t0 = -dL/dh0 . u(h(t0), t0), with the caller's exact h0.
    let u0 = field.eval(h0, t0)?;
    let d_t0 = -d_h0.dot(&u0)?;

    Ok(SolveGradients {
        d_h0,
        d_theta,
        d_t0,
        d_t1,
    })
}

/// Exact gradients of the fixed-step RK4 discretization, by recording the
/// whole solve on a tape with `t0`, `t1`, and the step size as differentiable
/// scalars. Defined only for the rk4 method.
pub fn grad_through_solver(
    h0: &Tensor,
    field: &VectorField,
    t0: f64,
    t1: f64,
    d_l_d_h_end: &Tensor,
    cfg: &SolverConfig,
) -> Result<SolveGradients> {
    if cfg.method != Method::Rk4 {
        return Err(Error::Contract(
            "grad_through_solver is only defined for the rk4 method".into(),
        ));
    }
    cfg.validate()?;
    d_l_d_h_end.check_finite("grad_through_solver upstream gradient")?;
    let n_steps = cfg.fixed_step_count;

    let mut tape = Tape::new(Precision::F64);
    let t0_id = tape.input(Tensor::scalar(t0))?;
    let t1_id = tape.input(Tensor::scalar(t1))?;
    let span = tape.sub(t1_id, t0_id)?;
    let dt = tape.affine(span, 1.0 / n_steps as f64, 0.0)?;
    let half_dt = tape.affine(dt, 0.5, 0.0)?;

    let h0_id = tape.input(h0.clone())?;
    let mut h = h0_id;
    for k in 0..n_steps {
        let t_k = {
            let offset = tape.affine(span, k as f64 / n_steps as f64, 0.0)?;
            tape.add(t0_id, offset)?
        };
        let t_mid = tape.add(t_k, half_dt)?;
        let t_next = tape.add(t_k, dt)?;

        let k1 = field.eval_tape(&mut tape, "field", h, t_k)?;
        let h2 = {
            let d = tape.mul_scalar(half_dt, k1)?;
            tape.add(h, d)?
        };
        let k2 = field.eval_tape(&mut tape, "field", h2, t_mid)?;
        let h3 = {
            let d = tape.mul_scalar(half_dt, k2)?;
            tape.add(h, d)?
        };
        let k3 = field.eval_tape(&mut tape, "field", h3, t_mid)?;
        let h4 = {
            let d = tape.mul_scalar(dt, k3)?;
            tape.add(h, d)?
        };
        let k4 = field.eval_tape(&mut tape, "field", h4, t_next)?;

        // h + dt/6 (k1 + 2 k2 + 2 k3 + k4)
        let k23 = tape.add(k2, k3)?;
        let k23x2 = tape.affine(k23, 2.0, 0.0)?;
        let k14 = tape.add(k1, k4)?;
        let ksum = tape.add(k14, k23x2)?;
        let dt6 = tape.affine(dt, 1.0 / 6.0, 0.0)?;
        let incr = tape.mul_scalar(dt6, ksum)?;
        h = tape.add(h, incr)?;
    }

    let seed = tape.input(d_l_d_h_end.clone())?;
    let objective = tape.dot(h, seed)?;
    let grads = tape.backward(objective)?;

    let mut d_theta = Vec::with_capacity(field.net.param_tensors().len());
    for (i, p) in field.net.param_tensors().iter().enumerate() {
        let name = if i % 2 == 0 {
            format!("field.{}.w", i / 2)
        } else {
            format!("field.{}.b", i / 2)
        };
        d_theta.push(
            grads
                .param(&name)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())),
        );
    }

    Ok(SolveGradients {
        d_h0: grads
            .at(h0_id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(h0.shape().to_vec())),
        d_theta,
        d_t0: grads.at(t0_id).map(|t| t.data()[0]).unwrap_or(0.0),
        d_t1: grads.at(t1_id).map(|t| t.data()[0]).unwrap_or(0.0),
    })
}
