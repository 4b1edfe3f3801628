//! SGD with classic (heavy-ball) momentum and a step-decay schedule:
//! `v <- momentum * v + grad; param <- param - lr * v`.

use ndarray::{Array, Dimension};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Optimizer hyperparameters; `lr(epoch) = lr0 * decay^(epoch / period)`.
///
/// `weight_decay` is L2 regularization folded into the gradient of weight
/// tensors (kernels and the head matrix; never biases or batch-norm
/// parameters). Without it, a trained head's weights grow without bound and
/// the next layer's identity warm start lands on a needle-sharp optimum
/// that plain SGD immediately falls off.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OptimConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub epochs_per_layer: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Global gradient-norm clip over all tensors of the layer being
    /// trained. A layer warm-started at the previous optimum sits in a
    /// valley whose curvature no practical learning rate respects; clipping
    /// bounds the escape transient without touching steady-state steps.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            decay_factor: 0.2,
            decay_period: 15,
            epochs_per_layer: 50,
            batch_size: 128,
            weight_decay: 5e-4,
            max_grad_norm: Some(2.0),
        }
    }
}

impl OptimConfig {
    /// Learning rate for a zero-based epoch index.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_period) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config("decay_factor must be in (0, 1]".into()));
        }
        if self.decay_period == 0 || self.batch_size == 0 {
            return Err(Error::Config("decay_period and batch_size must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Bookkeeping for one optimized layer: step/epoch counters and current lr.
#[derive(Debug, Clone, Default)]
pub struct OptState {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
}

/// Momentum buffer for a single parameter tensor; shape mirrors the parameter.
#[derive(Debug, Clone)]
pub struct Velocity<A, D: Dimension> {
    v: Array<A, D>,
}

impl<A: Scalar, D: Dimension> Velocity<A, D> {
    pub fn zeros_like(param: &Array<A, D>) -> Self {
        Self {
            v: Array::zeros(param.raw_dim()),
        }
    }

    /// One momentum step. Fails on non-finite gradients rather than
    /// poisoning the parameters.
    pub fn step(
        &mut self,
        param: &mut Array<A, D>,
        grad: &Array<A, D>,
        lr: A,
        momentum: A,
    ) -> Result<()> {
        self.step_decayed(param, grad, lr, momentum, A::zero())
    }

    /// Momentum step with L2 weight decay folded into the gradient:
    /// `v <- momentum*v + (grad + wd*param); param <- param - lr*v`.
    pub fn step_decayed(
        &mut self,
        param: &mut Array<A, D>,
        grad: &Array<A, D>,
        lr: A,
        momentum: A,
        weight_decay: A,
    ) -> Result<()> {
        assert_eq!(self.v.raw_dim(), param.raw_dim(), "sgd: velocity shape mismatch");
        assert_eq!(grad.raw_dim(), param.raw_dim(), "sgd: grad shape mismatch");
        assert!(lr > A::zero(), "sgd: lr must be positive");
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient in sgd step".into()));
        }
        ndarray::Zip::from(&mut self.v)
            .and(grad)
            .and(&*param)
            .for_each(|v, &g, &p| {
                *v = momentum * *v + g + weight_decay * p;
            });
        ndarray::Zip::from(param).and(&self.v).for_each(|p, &v| {
            *p = *p - lr * v;
        });
        Ok(())
    }
}
