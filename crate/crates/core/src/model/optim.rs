//! AdamW with decoupled weight decay and a cosine or constant schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Cosine,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step; gradients are averaged in batch order.
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    pub schedule: LrSchedule,
    /// Final loss is the mean over this many trailing steps.
    pub loss_window: usize,
    /// Abort once the loss is non-finite or exceeds this value.
    pub max_loss: f64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.1,
            adam_eps: 1e-8,
            schedule: LrSchedule::Cosine,
            loss_window: 20,
            max_loss: 1e3,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size == 0 {
            out.push("train.batch_size must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.weight_decay >= 0.0) {
            out.push("train.weight_decay must be >= 0".into());
        }
        if !(self.adam_eps > 0.0) {
            out.push("train.adam_eps must be > 0".into());
        }
        if self.loss_window == 0 {
            out.push("train.loss_window must be >= 1".into());
        }
        out
    }

    /// Learning rate at 1-based step `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let frac = (t.saturating_sub(1)) as f64 / self.steps as f64;
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Optimiser state: first and second moments per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    config: TrainConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    /// Which tensors receive weight decay.
    decay: Vec<bool>,
    t: usize,
}

impl<T: Real> AdamW<T> {
    /// Tensors of rank ≥ 2 are decayed, vectors (norm gains) are not.
    pub fn new(config: TrainConfig, params: &[&Tensor<T>]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay: params.iter().map(|p| p.shape().len() >= 2).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                op: "adamw",
                left: vec![self.m.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        self.t += 1;
        let c = &self.config;
        let lr = T::lit(c.lr_at(self.t));
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        let eps = T::lit(c.adam_eps);
        let wd = T::lit(c.weight_decay);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let decay = self.decay[i];
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mk = b1 * *mk + (T::one() - b1) * gk;
                *vk = b2 * *vk + (T::one() - b2) * gk * gk;
                let mh = *mk / bc1;
                let vh = *vk / bc2;
                if decay {
                    *w = *w - lr * wd * *w;
                }
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
