//! AdamW with decoupled weight decay, plus a one-cycle learning-rate
//! schedule (linear warmup to the peak over 30% of the steps, cosine decay
//! to zero afterwards).

use std::collections::BTreeMap;

use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: usize,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Apply one update at learning rate `lr`. Parameters without a gradient
    /// entry are left untouched. `lr == 0` leaves every parameter unchanged.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, value) in params.iter_mut() {
            let Some(grad) = grads.get(name) else { continue };
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(value));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros_like(value));
            if lr == 0.0 {
                continue;
            }
            for i in 0..value.len() {
                let g = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                let p = value.data()[i];
                value.data_mut()[i] =
                    p - lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p);
            }
        }
        Ok(())
    }
}

/// One-cycle schedule over a fixed number of steps.
#[derive(Debug, Clone)]
pub struct OneCycle {
    pub peak_lr: f64,
    pub total_steps: usize,
    pub warmup_frac: f64,
}

impl OneCycle {
    pub fn new(peak_lr: f64, total_steps: usize) -> Self {
        OneCycle {
            peak_lr,
            total_steps,
            warmup_frac: 0.3,
        }
    }

    /// Learning rate for the given zero-based step index.
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.peak_lr;
        }
        let warmup = ((self.total_steps as f64 * self.warmup_frac).round() as usize).max(1);
        if step < warmup {
            self.peak_lr * (step + 1) as f64 / warmup as f64
        } else {
            let span = (self.total_steps - warmup).max(1) as f64;
            let progress = ((step - warmup) as f64 / span).min(1.0);
            self.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
