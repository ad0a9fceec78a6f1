//! Numerical integration of `dh/dt = u(h, t)` in forward and reverse time.
//!
//! Two integrators: classical fixed-step RK4 (also the reference path for
//! backprop-through-solver gradients) and adaptive Dormand-Prince 5(4) with
//! an embedded error estimate and standard step-size control. Reverse-time
//! horizons (`t1 < t0`) integrate with a negated step direction, which
//! realizes final-value problems without transforming the field.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Right-hand side of the ODE.
pub trait OdeField {
    fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor>;
}

/// Adapter so plain closures can act as fields in tests and examples.
pub struct FnField<F>(pub F);

impl<F: Fn(&Tensor, f64) -> Tensor> OdeField for FnField<F> {
    fn eval(&self, h: &Tensor, t: f64) -> Result<Tensor> {
        Ok((self.0)(h, t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rk4,
    #[default]
    Dopri5,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    /// First trial step for dopri5; `None` selects the standard
    /// starting-step heuristic.
    pub initial_step: Option<f64>,
    /// Number of equal steps for the rk4 method.
    pub fixed_step_count: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Dopri5,
            rtol: 1e-5,
            atol: 1e-7,
            max_steps: 10_000,
            initial_step: None,
            fixed_step_count: 20,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0) || !(self.atol > 0.0) {
            return Err(Error::Contract("solver tolerances must be positive".into()));
        }
        if self.max_steps < 1 {
            return Err(Error::Contract("max_steps must be at least 1".into()));
        }
        if self.fixed_step_count < 1 {
            return Err(Error::Contract("fixed_step_count must be at least 1".into()));
        }
        if let Some(h) = self.initial_step {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Contract("initial_step must be positive".into()));
            }
        }
        Ok(())
    }

    /// Same config with tolerances tightened by `factor`.
    pub fn tightened(&self, factor: f64) -> SolverConfig {
        SolverConfig {
            rtol: self.rtol / factor,
            atol: self.atol / factor,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub h_end: Tensor,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Accepted time points including both endpoints; strictly monotone
    /// (increasing for IVPs, decreasing for FVPs).
    pub t_grid: Vec<f64>,
}

/// One classical 4-stage Runge-Kutta step.
pub fn rk4_step<F: OdeField>(field: &F, h: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
    if dt == 0.0 {
        return Err(Error::Contract("rk4_step requires dt != 0".into()));
    }
    let k1 = field.eval(h, t)?;
    let k2 = field.eval(&h.add_scaled(&k1, dt * 0.5)?, t + dt * 0.5)?;
    let k3 = field.eval(&h.add_scaled(&k2, dt * 0.5)?, t + dt * 0.5)?;
    let k4 = field.eval(&h.add_scaled(&k3, dt)?, t + dt)?;
    let mut out = h.clone();
    out.axpy(&k1, dt / 6.0)?;
    out.axpy(&k2, dt / 3.0)?;
    out.axpy(&k3, dt / 3.0)?;
    out.axpy(&k4, dt / 6.0)?;
    Ok(out)
}

/// Solve the IVP (or FVP when `t1 < t0`) with the configured method.
///
/// `t0 == t1` returns `h0` exactly with zero steps.
pub fn ode_solve<F: OdeField>(
    h0: &Tensor,
    field: &F,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    h0.check_finite("ode_solve initial state")?;
    if t0 == t1 {
        return Ok(SolveResult {
            h_end: h0.clone(),
            steps_accepted: 0,
            steps_rejected: 0,
            t_grid: vec![t0],
        });
    }
    match cfg.method {
        Method::Rk4 => rk4_fixed(h0, field, t0, t1, cfg),
        Method::Dopri5 => dopri5_adaptive(h0, field, t0, t1, cfg),
    }
}

fn rk4_fixed<F: OdeField>(
    h0: &Tensor,
    field: &F,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    let n = cfg.fixed_step_count;
    let dt = (t1 - t0) / n as f64;
    let mut h = h0.clone();
    let mut t_grid = Vec::with_capacity(n + 1);
    t_grid.push(t0);
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        h = rk4_step(field, &h, t, dt)?;
        if !h.is_finite() {
            return Err(Error::Instability { t: t + dt, t0, t1 });
        }
        t_grid.push(if k + 1 == n { t1 } else { t0 + (k + 1) as f64 * dt });
    }
    Ok(SolveResult {
        h_end: h,
        steps_accepted: n,
        steps_rejected: 0,
        t_grid,
    })
}

// Dormand-Prince 5(4) Butcher tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
// Weights for the 5th-order solution (b7 = 0; FSAL).
const B: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
// 5th-minus-4th-order error weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;

/// One Dormand-Prince 5(4) step: the 5th-order update plus the embedded
/// error estimate vector. `k1` is `field(h, t)` when available (FSAL reuse).
pub fn dopri5_step<F: OdeField>(
    field: &F,
    h: &Tensor,
    t: f64,
    dt: f64,
    k1: Option<&Tensor>,
) -> Result<(Tensor, Tensor, Tensor)> {
    let k1 = match k1 {
        Some(k) => k.clone(),
        None => field.eval(h, t)?,
    };
    let mut k = vec![k1; 7];
    for stage in 1..7 {
        let mut y = h.clone();
        for (j, kj) in k.iter().take(stage).enumerate() {
            let a = A[stage - 1][j];
            if a != 0.0 {
                y.axpy(kj, dt * a)?;
            }
        }
        k[stage] = field.eval(&y, t + C[stage] * dt)?;
    }
    let mut y5 = h.clone();
    let mut err = Tensor::zeros_like(h);
    for (j, kj) in k.iter().enumerate() {
        if B[j] != 0.0 {
            y5.axpy(kj, dt * B[j])?;
        }
        if E[j] != 0.0 {
            err.axpy(kj, dt * E[j])?;
        }
    }
    // k[6] = field(t + dt, y5): the FSAL derivative for the next step.
    let k_last = k.pop().unwrap();
    Ok((y5, err, k_last))
}

fn scaled_error_norm(err: &Tensor, y0: &Tensor, y1: &Tensor, atol: f64, rtol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let sum: f64 = err
        .data()
        .iter()
        .zip(y0.data().iter().zip(y1.data()))
        .map(|(e, (a, b))| {
            let sk = atol + rtol * a.abs().max(b.abs());
            (e / sk) * (e / sk)
        })
        .sum();
    (sum / n).sqrt()
}

/// Standard starting-step heuristic (order 5).
fn initial_step_guess<F: OdeField>(
    field: &F,
    h0: &Tensor,
    f0: &Tensor,
    t0: f64,
    posneg: f64,
    atol: f64,
    rtol: f64,
) -> Result<f64> {
    let sk_norm = |v: &Tensor, reference: &Tensor| -> f64 {
        let n = v.len().max(1) as f64;
        let sum: f64 = v
            .data()
            .iter()
            .zip(reference.data())
            .map(|(x, r)| {
                let sk = atol + rtol * r.abs();
                (x / sk) * (x / sk)
            })
            .sum();
        (sum / n).sqrt()
    };
    let d0 = sk_norm(h0, h0);
    let d1 = sk_norm(f0, h0);
    let h_a = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let y1 = h0.add_scaled(f0, h_a * posneg)?;
    let f1 = field.eval(&y1, t0 + h_a * posneg)?;
    let d2 = sk_norm(&f1.sub(f0)?, h0) / h_a;
    let max_d = d1.max(d2);
    let h_b = if max_d <= 1e-15 {
        (h_a * 1e-3).max(1e-6)
    } else {
        (0.01 / max_d).powf(1.0 / 5.0)
    };
    Ok((100.0 * h_a).min(h_b))
}

/// Adaptive Dormand-Prince 5(4) integration with the standard accept/reject
/// controller: a step is accepted when the scaled error norm is at most 1.
pub fn dopri5_adaptive<F: OdeField>(
    h0: &Tensor,
    field: &F,
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    if t0 == t1 {
        return Ok(SolveResult {
            h_end: h0.clone(),
            steps_accepted: 0,
            steps_rejected: 0,
            t_grid: vec![t0],
        });
    }
    let posneg = (t1 - t0).signum();
    let span = (t1 - t0).abs();
    let f0 = field.eval(h0, t0)?;
    f0.check_finite("field output at t0")
        .map_err(|_| Error::Instability { t: t0, t0, t1 })?;

    let mut dt = match cfg.initial_step {
        Some(h) => h.min(span),
        None => initial_step_guess(field, h0, &f0, t0, posneg, cfg.atol, cfg.rtol)?.min(span),
    };

    let mut t = t0;
    let mut y = h0.clone();
    let mut k1 = f0;
    let mut accepted = 0usize;
    let mut rejected = 0usize;
    let mut t_grid = vec![t0];

    while (t1 - t) * posneg > 0.0 {
        if accepted + rejected >= cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                t0,
                t1,
                max_steps: cfg.max_steps,
            });
        }
        let remaining = (t1 - t).abs();
        let last = dt >= remaining;
        let h_step = if last { remaining } else { dt } * posneg;

        let (y5, err, k_last) = dopri5_step(field, &y, t, h_step, Some(&k1))?;
        if !y5.is_finite() || !err.is_finite() || !k_last.is_finite() {
            return Err(Error::Instability { t, t0, t1 });
        }
        let err_norm = scaled_error_norm(&err, &y, &y5, cfg.atol, cfg.rtol);

        let factor = if err_norm == 0.0 {
            FAC_MAX
        } else {
            (SAFETY * err_norm.powf(-0.2)).clamp(FAC_MIN, FAC_MAX)
        };

        if err_norm <= 1.0 {
            t = if last { t1 } else { t + h_step };
            y = y5;
            k1 = k_last;
            accepted += 1;
            t_grid.push(t);
            dt = (dt * factor).min(span);
        } else {
            rejected += 1;
            dt *= factor.min(1.0);
            if dt.abs() < 1e-14 * span.max(1.0) {
                return Err(Error::Instability { t, t0, t1 });
            }
        }
    }

    Ok(SolveResult {
        h_end: y,
        steps_accepted: accepted,
        steps_rejected: rejected,
        t_grid,
    })
}
