//! Stochastic gradient descent with classical momentum.

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        }
    }

    /// v ← μ·v + g;  θ ← θ − η·v. Gradients are cleared afterwards.
    /// `params` must be passed in the same order on every call.
    pub fn step(&mut self, params: Vec<&mut Tensor<S>>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(TensorError::InvalidSpec(format!(
                "optimizer tracks {} parameter blocks, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = S::from_f64_lossy(self.learning_rate);
        let mu = S::from_f64_lossy(self.momentum);
        for (p, v) in params.into_iter().zip(&mut self.velocity) {
            if p.grad().is_none() {
                continue;
            }
            let (data, grad) = p.data_and_grad_mut();
            for ((x, g), v) in data.iter_mut().zip(grad.iter_mut()).zip(v.iter_mut()) {
                *v = mu * *v + *g;
                *x -= lr * *v;
                *g = S::zero();
            }
        }
        Ok(())
    }
}
