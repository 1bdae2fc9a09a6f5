//! AdamW optimizer and learning-rate schedules.

use crate::nn::Param;
use ndarray::ArrayD;
use std::collections::HashMap;

/// Cosine decay from `lr_max` at step 0 to zero at `total_steps`; steps past
/// the horizon clamp to zero.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    lr_max * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos()) / 2.0
}

/// Exponential decay: `lr_max * gamma^epoch`.
pub fn exponential_lr(epoch: u64, gamma: f64, lr_max: f64) -> f64 {
    lr_max * gamma.powi(epoch as i32)
}

/// AdamW with decoupled weight decay. Parameters without an accumulated
/// gradient are skipped outright (no moment update, no decay), so pathways a
/// mode never exercises stay bit-identical.
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    state: HashMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        AdamW {
            betas,
            eps: 1e-8,
            weight_decay,
            t: 0,
            state: HashMap::new(),
        }
    }

    /// Apply one update at learning rate `lr` and clear the used gradients.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.betas.0 as f32, self.betas.1 as f32);
        let bc1 = 1.0 - (self.betas.0 as f32).powi(self.t as i32);
        let bc2 = 1.0 - (self.betas.1 as f32).powi(self.t as i32);
        let lr = lr as f32;
        let eps = self.eps as f32;
        for p in params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            // Decay only matrix-or-higher parameters; biases and norm gains
            // are left unregularized.
            let wd = if p.value.ndim() >= 2 {
                self.weight_decay as f32
            } else {
                0.0
            };
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&grad)
                .for_each(|pv, mv, vv, &g| {
                    *mv = b1 * *mv + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv -= lr * (mhat / (vhat.sqrt() + eps) + wd * *pv);
                });
        }
    }
}
