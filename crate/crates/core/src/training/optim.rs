use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{shape_err, Float, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct OptimState<T: Float = f32> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Float> OptimState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
///
/// Parameters that do not require gradients are left untouched. Gradients are
/// read, not cleared.
pub fn optimizer_step<T: Float>(store: &mut ParamStore<T>, state: &mut OptimState<T>, lr: f64) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Invariant(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.requires_grad() {
            continue;
        }
        if state.m[i].shape() != p.value().shape() {
            return Err(shape_err("optimizer_step", format!("moments for `{}` do not match", p.name())).into());
        }
        let grad = p.grad().clone();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let value = p.value_mut().data_mut();
        for j in 0..value.len() {
            let g = grad.data()[j].as_f64();
            let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * g;
            let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * g * g;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            let mut x = value[j].as_f64();
            x -= lr * c.weight_decay * x;
            x -= lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
            value[j] = T::lit(x);
        }
    }
    Ok(())
}

/// Linear warmup to `base_lr`, then cosine decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl Schedule {
    /// Warmup covers `warmup_frac` of `total_steps`, rounded down.
    pub fn new(base_lr: f64, warmup_frac: f64, total_steps: u64) -> Result<Self> {
        if total_steps == 0 || !(0.0..1.0).contains(&warmup_frac) {
            return Err(Error::Config(format!(
                "schedule needs total_steps > 0 and warmup_frac in [0, 1), got {total_steps} and {warmup_frac}"
            )));
        }
        Ok(Self {
            base_lr,
            warmup_steps: (warmup_frac * total_steps as f64) as u64,
            total_steps,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        lr_at(step, self)
    }
}

pub fn lr_at(step: u64, s: &Schedule) -> Result<f64> {
    if step > s.total_steps || s.warmup_steps >= s.total_steps {
        return Err(Error::Config(format!(
            "step {step} outside schedule of {} steps ({} warmup)",
            s.total_steps, s.warmup_steps
        )));
    }
    if step < s.warmup_steps {
        return Ok(s.base_lr * step as f64 / s.warmup_steps as f64);
    }
    let progress = (step - s.warmup_steps) as f64 / (s.total_steps - s.warmup_steps) as f64;
    Ok(s.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
