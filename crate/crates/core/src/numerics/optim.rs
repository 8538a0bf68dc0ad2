use super::{ParamStore, Real, Tensor};
use crate::error::{contract, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
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
            weight_decay: 1e-4,
        }
    }
}

/// Moment buffers for decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW<T: Real = f32> {
    pub config: AdamWConfig,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros = |_| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            m: zeros(()),
            v: zeros(()),
            t: 0,
        }
    }

    /// Steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One AdamW update with learning rate `lr`, reading the gradients held in
/// `store`. Gradients are left untouched; callers zero them per step.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamW<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(contract(format!("adamw_step: learning rate {lr}")));
    }
    if state.m.len() != store.len() {
        return Err(contract("adamw_step: optimizer state built for a different store"));
    }
    for (_, p) in store.iter() {
        if let Some(i) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                op: "adamw_step",
                detail: format!("non-finite gradient in {} at {i}", p.name),
            });
        }
    }
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
    let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
    let lr_t = T::from_f64(lr);
    let decay = T::from_f64(lr * c.weight_decay);
    let (bc1, bc2, eps) = (T::from_f64(bc1), T::from_f64(bc2), T::from_f64(c.eps));

    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, theta) in p.value.data_mut().iter_mut().enumerate() {
            md[i] = b1 * md[i] + one_b1 * g[i];
            vd[i] = b2 * vd[i] + one_b2 * g[i] * g[i];
            let m_hat = md[i] / bc1;
            let v_hat = vd[i] / bc2;
            *theta = *theta - lr_t * m_hat / (v_hat.sqrt() + eps) - decay * *theta;
        }
    }
    Ok(())
}

/// Linear warm-up to `base_lr`, then half-cosine decay to zero at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    let total = total_steps.max(1);
    let step = step.min(total);
    let warmup = warmup_steps.min(total - 1);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let progress = (step - warmup) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
