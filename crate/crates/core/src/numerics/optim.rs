use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{cst, Scalar, Tensor};

/// A named trainable tensor together with its gradient and AdamW moments.
#[derive(Clone, Debug)]
pub struct ParamSlot<T = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub adam_m: Tensor<T>,
    pub adam_v: Tensor<T>,
    pub step_count: u64,
}

impl<T: Scalar> ParamSlot<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let dims = value.dims().to_vec();
        Self {
            name: name.into(),
            grad: Tensor::zeros(&dims),
            adam_m: Tensor::zeros(&dims),
            adam_v: Tensor::zeros(&dims),
            value,
            step_count: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill_zero();
    }

    /// Copies values (not optimizer state) into another precision.
    pub fn cast<U: Scalar>(&self) -> ParamSlot<U> {
        ParamSlot::new(self.name.clone(), self.value.cast())
    }
}

/// Anything that owns a fixed, ordered list of parameter slots.
pub trait Params<T: Scalar> {
    fn slots(&self) -> Vec<&ParamSlot<T>>;
    fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>>;

    fn zero_grads(&mut self) {
        for s in self.slots_mut() {
            s.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.slots().iter().map(|s| s.value.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub total_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            total_steps: 1000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::Config(format!("optimizer: invalid {f}")));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate");
        }
        if !(self.beta1 >= 0.0 && self.beta1 < 1.0) {
            return bad("beta1");
        }
        if !(self.beta2 >= 0.0 && self.beta2 < 1.0) {
            return bad("beta2");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio");
        }
        if self.total_steps == 0 {
            return bad("total_steps");
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_ratio * self.total_steps as f64
    }

    /// Linear warmup to `learning_rate`, then linear decay to zero at
    /// `total_steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step as f64;
        let total = self.total_steps as f64;
        let warm = self.warmup_steps();
        if s >= total {
            return 0.0;
        }
        if warm > 0.0 && s < warm {
            return self.learning_rate * s / warm;
        }
        self.learning_rate * ((total - s) / (total - warm)).clamp(0.0, 1.0)
    }
}

/// One AdamW update (decoupled weight decay, bias-corrected moments) on every
/// slot, then zeroes the gradients.
pub fn adamw_step<T: Scalar>(slots: &mut [&mut ParamSlot<T>], cfg: &OptimizerConfig) {
    for slot in slots.iter_mut() {
        slot.step_count += 1;
        let t = slot.step_count;
        let lr = cfg.lr_at(t);
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2): (T, T) = (cst(cfg.beta1), cst(cfg.beta2));
        let (lr_t, decay, eps): (T, T, T) = (cst(lr), cst(lr * cfg.weight_decay), cst(cfg.epsilon));
        let (bc1, bc2): (T, T) = (cst(bc1), cst(bc2));
        let ParamSlot { value, grad, adam_m, adam_v, .. } = &mut **slot;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(adam_m.data_mut().iter_mut())
            .zip(adam_v.data_mut().iter_mut())
        {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= decay * *w;
            *w -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
        slot.grad.fill_zero();
    }
}

/// Scales every gradient so that the global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(slots: &mut [&mut ParamSlot<T>], max_norm: f64) -> f64 {
    let sq: f64 = slots
        .iter()
        .flat_map(|s| s.grad.data().iter())
        .map(|g| g.to_f64().unwrap_or(0.0).powi(2))
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k: T = cst(max_norm / norm);
        for s in slots.iter_mut() {
            s.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}
