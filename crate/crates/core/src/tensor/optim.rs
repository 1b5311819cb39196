use std::collections::BTreeMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

/// Momentum SGD hyper-parameters and per-parameter velocity buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState<S> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity keyed by parameter name; zero until the first step touches it.
    pub velocity: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }
}

/// Momentum SGD with coupled L2 weight decay:
/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub state: OptimizerState<S>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(state: OptimizerState<S>) -> Self {
        Self { state }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.state.lr = lr;
    }

    /// Updates every parameter for which `trainable(name)` holds.
    ///
    /// Nothing is modified if any selected gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<S>, trainable: impl Fn(&str) -> bool) -> Result<()> {
        if let Some(p) = store
            .iter()
            .find(|p| trainable(&p.name) && !p.grad.is_finite())
        {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        let lr: S = lit(self.state.lr);
        let mu: S = lit(self.state.momentum);
        let wd: S = lit(self.state.weight_decay);
        for p in store.iter_mut().filter(|p| trainable(&p.name)) {
            let v = self
                .state
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((vi, th), &g) in v
                .data_mut()
                .iter_mut()
                .zip(p.value.data_mut())
                .zip(p.grad.data())
            {
                *vi = mu * *vi + g + wd * *th;
                *th = *th - lr * *vi;
            }
        }
        Ok(())
    }
}
