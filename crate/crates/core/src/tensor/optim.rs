use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + g + wd·p`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    config: SgdConfig,
    buffers: BTreeMap<String, Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.momentum) || config.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "invalid SGD settings lr={} momentum={} weight_decay={}",
                config.lr, config.momentum, config.weight_decay
            )));
        }
        Ok(Self {
            config,
            buffers: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// Updates every given parameter in place. Each one must have a gradient
    /// of matching length in `grads`.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Vec<f32>>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let SgdConfig {
            lr,
            momentum,
            weight_decay,
        } = self.config;
        for (name, param) in params {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::MissingGradient(name.to_string()))?;
            if grad.len() != param.numel() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("`{name}` has {} values, gradient {}", param.numel(), grad.len()),
                ));
            }
            let velocity = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if velocity.len() != grad.len() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("momentum buffer for `{name}` changed size"),
                ));
            }
            for ((p, v), g) in param.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
                *v = momentum * *v + g + weight_decay * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
