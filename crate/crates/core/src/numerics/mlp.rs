use crate::error::Result;
use crate::numerics::ops::{linear_backward, linear_forward, relu_backward, relu_forward};
use crate::numerics::optim::ParamSlot;
use crate::numerics::rng::SplitMix64;
use crate::numerics::tensor::{Scalar, Tensor};

/// `in → hidden → ReLU → out`.
#[derive(Clone, Debug)]
pub struct Mlp<T = f32> {
    pub w1: ParamSlot<T>,
    pub b1: ParamSlot<T>,
    pub w2: ParamSlot<T>,
    pub b2: ParamSlot<T>,
}

/// Activations kept for the backward pass.
pub struct MlpCache<T> {
    x: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(prefix: &str, c_in: usize, hidden: usize, c_out: usize, rng: &mut SplitMix64) -> Self {
        Self {
            w1: ParamSlot::new(format!("{prefix}/w1"), Tensor::randn(&[hidden, c_in], (2.0 / c_in as f64).sqrt(), rng)),
            b1: ParamSlot::new(format!("{prefix}/b1"), Tensor::zeros(&[hidden])),
            w2: ParamSlot::new(format!("{prefix}/w2"), Tensor::randn(&[c_out, hidden], (1.0 / hidden as f64).sqrt(), rng)),
            b2: ParamSlot::new(format!("{prefix}/b2"), Tensor::zeros(&[c_out])),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp { w1: self.w1.cast(), b1: self.b1.cast(), w2: self.w2.cast(), b2: self.b2.cast() }
    }

    pub fn slots(&self) -> Vec<&ParamSlot<T>> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn slots_mut(&mut self) -> Vec<&mut ParamSlot<T>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MlpCache<T>)> {
        let pre = linear_forward(x, &self.w1.value, &self.b1.value)?;
        let hidden = relu_forward(&pre);
        let out = linear_forward(&hidden, &self.w2.value, &self.b2.value)?;
        Ok((out, MlpCache { x: x.clone(), pre, hidden }))
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let dh = linear_backward(&cache.hidden, &self.w2.value, dy, &mut self.w2.grad, &mut self.b2.grad);
        let dpre = relu_backward(&cache.pre, &dh);
        linear_backward(&cache.x, &self.w1.value, &dpre, &mut self.w1.grad, &mut self.b1.grad)
    }
}
