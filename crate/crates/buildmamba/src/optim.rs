//! Adaptive optimizer with decoupled weight decay, two-group learning rates,
//! global-norm gradient clipping, and the warm-restart cosine schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Annealed rate at a position within one cycle.
pub fn lr_at(fraction: f64, lr_base: f64, lr_min: f64) -> f64 {
    lr_min + 0.5 * (lr_base - lr_min) * (1.0 + (std::f64::consts::PI * fraction).cos())
}

/// Cycle bookkeeping: lengths t0, t0*t_mult, t0*t_mult^2, ...
#[derive(Debug, Clone, Copy)]
pub struct CosineRestarts {
    pub t0: usize,
    pub t_mult: usize,
}

impl CosineRestarts {
    /// (start, length) of the cycle containing `epoch`.
    pub fn cycle(&self, epoch: usize) -> (usize, usize) {
        let mut start = 0;
        let mut len = self.t0;
        while epoch >= start + len {
            start += len;
            len *= self.t_mult;
        }
        (start, len)
    }

    /// Position in [0,1) within the current cycle; 0 right after a restart.
    pub fn fraction(&self, epoch: usize) -> f64 {
        let (start, len) = self.cycle(epoch);
        (epoch - start) as f64 / len as f64
    }
}

/// First/second-moment adaptive updates; weight decay shrinks parameters
/// directly (decoupled), so it applies even where the gradient is zero.
pub struct AdamW {
    lr_main: f64,
    lr_backbone: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    backbone: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr_main: f64, lr_backbone: f64, weight_decay: f64) -> AdamW {
        let sizes: Vec<usize> = store.slots().iter().map(|s| s.value.len()).collect();
        AdamW {
            lr_main,
            lr_backbone,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            backbone: store.names().map(|n| n.starts_with("backbone.")).collect(),
        }
    }

    /// Scale all gradients so their joint L2 norm stays at or below
    /// `max_norm`; returns the pre-clip norm.
    pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
        let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|v| v * v).sum();
        let norm = sq.sqrt();
        if norm > max_norm {
            let s = max_norm / norm;
            for g in grads.iter_mut().flatten() {
                for v in g.iter_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    /// One update over every slot. `lr_factor` scales both group rates (the
    /// scheduler hands in lr_at(fraction, 1, 0.01)). A missing gradient is a
    /// zero gradient: moments decay and weight decay still applies.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Vec<f64>>],
        lr_factor: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::invalid(
                "optimizer",
                format!("expected {} slots, got {} grads / {} params", self.m.len(), grads.len(), store.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for k in 0..grads.len() {
            let lr = lr_factor * if self.backbone[k] { self.lr_backbone } else { self.lr_main };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let vals = store.value_mut(k);
            for i in 0..vals.len() {
                let g = grads[k].as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                vals[i] -= lr * (update + self.weight_decay * vals[i]);
            }
        }
        Ok(())
    }
}
