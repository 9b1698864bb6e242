use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::neuralcore::{ParamGroup, ParamStore};

pub const LR_ENCODER: f64 = 5e-6;
pub const LR_MAIN: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_main: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_encoder: LR_ENCODER,
            lr_main: LR_MAIN,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and one learning rate per parameter
/// group.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    lr_encoder: f64,
    lr_main: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            lr_encoder: cfg.lr_encoder,
            lr_main: cfg.lr_main,
            m: zeros(()),
            v: zeros(()),
            step: 0,
            cfg,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.lr_encoder,
            ParamGroup::Main => self.lr_main,
        }
    }

    /// Scales both groups by the same factor.
    pub fn scale_lr(&mut self, factor: f64) {
        self.lr_encoder *= factor;
        self.lr_main *= factor;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update from the gradients in `store`. A non-finite gradient
    /// aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<(), TrainError> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(TrainError::NonFiniteGradient { param: p.name.clone() });
        }
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
        let (lr_e, lr_m) = (self.lr_encoder, self.lr_main);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let lr = match p.group {
                ParamGroup::Encoder => lr_e,
                ParamGroup::Main => lr_m,
            };
            let grad = p.grad.data().to_vec();
            for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *theta = *theta - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *theta;
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let total = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for p in store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    total
}
