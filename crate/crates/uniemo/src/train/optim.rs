//! Adaptive-moment optimizer with decoupled weight decay, and the
//! warmup + decay learning-rate schedule.

use crate::autograd::Array;
use crate::config::Schedule;
use crate::params::ParamStore;
use indexmap::IndexMap;

const ADAM_EPS: f64 = 1e-8;

/// Adam with decoupled weight decay. Decay applies only to tensors of
/// rank two or higher, so biases and norm parameters are never decayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far (drives bias correction).
    pub step: u64,
    pub m: IndexMap<String, Array>,
    pub v: IndexMap<String, Array>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update at learning rate `lr`. Parameters without a
    /// gradient this step are left untouched (their moments included).
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &IndexMap<String, Array>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(grad) = grads.get(&name) else { continue };
            let param = params.get_mut(&name).expect("listed name");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(param.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(param.raw_dim()));
            let decay = if param.ndim() >= 2 {
                self.weight_decay
            } else {
                0.0
            };
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(grad)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + decay * *p);
                });
        }
    }
}

/// Learning rate for the (zero-based) step about to be applied.
///
/// Steps below `warmup` ramp linearly from `base / (warmup + 1)`; after
/// warmup a cosine schedule decays from `base` to zero at `total` (the
/// constant schedule stays at `base`). Progress past `total` clamps.
pub fn schedule_lr(
    schedule: Schedule,
    base_lr: f64,
    warmup: usize,
    total: usize,
    step: u64,
) -> f64 {
    let step = step as f64;
    let warmup_f = warmup as f64;
    if step < warmup_f {
        return base_lr * (step + 1.0) / (warmup_f + 1.0);
    }
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Cosine => {
            let span = (total as f64 - warmup_f).max(1.0);
            let progress = ((step - warmup_f) / span).clamp(0.0, 1.0);
            base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
