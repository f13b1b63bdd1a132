use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named model parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
    pub grad: Option<Tensor<T>>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>) -> Self {
        Parameter {
            name: name.into(),
            tensor,
            trainable: true,
            grad: None,
        }
    }

    /// Adds `g` into the gradient buffer. Ignored for frozen parameters.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        if !self.trainable {
            return;
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    /// Elementwise gradient clip applied before the momentum update.
    pub clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            clip: None,
        }
    }
}

/// SGD with heavy-ball momentum: `v = m·v + g; w -= lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<T: Real = f32> {
    lr: T,
    momentum: T,
    clip: Option<T>,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !config.lr.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                config.lr
            )));
        }
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1), got {}",
                config.momentum
            )));
        }
        if let Some(c) = config.clip {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("clip must be positive, got {c}")));
            }
        }
        Ok(Sgd {
            lr: T::from_f64(config.lr),
            momentum: T::from_f64(config.momentum),
            clip: config.clip.map(T::from_f64),
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    /// Updates every trainable parameter that has a gradient, then clears
    /// all gradients. Frozen parameters are never written.
    pub fn step(&mut self, params: &mut [Parameter<T>]) {
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for (p, vel) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let Some(grad) = p.grad.take() else { continue };
            if !p.trainable {
                continue;
            }
            let v = vel.get_or_insert_with(|| vec![T::zero(); grad.len()]);
            for ((w, v), &g) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(v.iter_mut())
                .zip(grad.data())
            {
                let g = match self.clip {
                    Some(c) => g.max(-c).min(c),
                    None => g,
                };
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
    }
}
