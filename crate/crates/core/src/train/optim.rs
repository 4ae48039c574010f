use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

/// Learning-rate schedule and batch settings shared by both training phases.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub base_lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn pretrain() -> Self {
        Self {
            epochs: 50,
            base_lr: 1e-3,
            batch_size: 6,
            weight_decay: 0.01,
            warmup_epochs: 1,
            seed: 0,
        }
    }

    /// Small-sample fine-tuning (26-state config).
    pub fn finetune_small() -> Self {
        Self {
            epochs: 20,
            base_lr: 5e-5,
            ..Self::pretrain()
        }
    }

    /// Large-sample fine-tuning (motor config).
    pub fn finetune_large() -> Self {
        Self {
            epochs: 15,
            base_lr: 1e-4,
            batch_size: 12,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "bad lr {} or weight decay {}",
                self.base_lr, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Linear warmup over `warmup_steps`, then cosine annealing to 0 at `total_steps`.
pub fn lr_at(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a flat parameter. `step` counts from 1.
pub fn adamw_update(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &AdamWConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * cfg.weight_decay * p[i] + lr * mhat / (vhat.sqrt() + cfg.eps);
    }
}

/// AdamW state for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value().shape()))
            .collect();
        AdamW {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies `grads` (one per parameter, `None` to leave it untouched).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        self.step_scaled(params, grads, lr, &vec![1.0; grads.len()])
    }

    /// Like [`AdamW::step`] with parameter `i` updated at `lr * lr_scale[i]`.
    pub fn step_scaled(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
        lr_scale: &[f64],
    ) -> Result<()> {
        if grads.len() != params.len()
            || self.m.len() != params.len()
            || lr_scale.len() != params.len()
        {
            return Err(Error::Invalid(format!(
                "AdamW: {} grads / {} moments for {} params",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let ids: Vec<ParamId> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let mut p = params.get(id).value().clone();
            adamw_update(
                p.data_mut(),
                g.data(),
                self.m[i].data_mut(),
                self.v[i].data_mut(),
                self.step,
                lr * lr_scale[i],
                &self.cfg,
            );
            params.set(id, p)?;
        }
        Ok(())
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let total = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total.is_finite() {
        let s = max_norm / total;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    total
}
