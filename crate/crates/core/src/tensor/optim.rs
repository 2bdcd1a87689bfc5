use super::Tensor;
use crate::error::{Error, Result};

/// SGD with Nesterov momentum and coupled L2 weight decay.
///
/// Per parameter entry, with gradient `g`:
///
/// ```text
/// g ← g + λ·θ
/// v ← μ·v − lr·g
/// θ ← θ + μ·v − lr·g
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be >= 0, got {weight_decay}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    /// Velocity buffers in parameter order; empty before the first step.
    pub fn velocities(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocities(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// Updates every parameter from its accumulated gradient, then zeroes
    /// the gradients. Parameters must be passed in the same order each call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, step received {}",
                self.velocity.len(),
                params.len()
            )));
        }
        for (p, v) in params.into_iter().zip(self.velocity.iter_mut()) {
            if v.len() != p.numel() {
                return Err(Error::Config(format!(
                    "velocity length {} does not match parameter of shape {}",
                    v.len(),
                    p.shape()
                )));
            }
            nesterov_update(p, v, self.lr, self.momentum, self.weight_decay);
        }
        Ok(())
    }
}

fn nesterov_update(param: &mut Tensor, velocity: &mut [f64], lr: f64, mu: f64, decay: f64) {
    let (data, grad) = param.data_and_grad_mut();
    let Some(grad) = grad else {
        return;
    };
    for ((theta, g), v) in data.iter_mut().zip(grad.iter_mut()).zip(velocity.iter_mut()) {
        let g_total = *g + decay * *theta;
        *v = mu * *v - lr * g_total;
        *theta += mu * *v - lr * g_total;
        *g = 0.0;
    }
}
