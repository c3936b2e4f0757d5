//! SGD with momentum and weight decay for the encoders, RMSprop for critics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Sgd {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsProp {
    fn default() -> Self {
        RmsProp {
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Per-parameter buffers keyed by parameter name. Buffers are created as
/// zeros on first use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub momentum: BTreeMap<String, Tensor>,
    pub square_avg: BTreeMap<String, Tensor>,
}

fn check(name: &str, p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Config(format!(
            "gradient for {name} has shape {:?}, parameter has {:?}",
            g.shape(),
            p.shape()
        )));
    }
    Ok(())
}

fn buffer<'a>(map: &'a mut BTreeMap<String, Tensor>, name: &str, like: &Tensor) -> Result<&'a mut Tensor> {
    let buf = map
        .entry(name.to_string())
        .or_insert_with(|| Tensor::filled(like.rows(), like.cols(), 0.0));
    if buf.shape() != like.shape() {
        return Err(Error::Config(format!(
            "optimizer buffer for {name} has shape {:?}, parameter has {:?}",
            buf.shape(),
            like.shape()
        )));
    }
    Ok(buf)
}

impl OptimizerState {
    /// `v ← μ·v + (g + wd·p); p ← p − lr·v`
    pub fn sgd_step(&mut self, name: &str, p: &mut Tensor, g: &Tensor, lr: f64, cfg: Sgd) -> Result<()> {
        check(name, p, g)?;
        let v = buffer(&mut self.momentum, name, p)?;
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = cfg.momentum * *vi + (gi + cfg.weight_decay * *pi);
            *pi -= lr * *vi;
        }
        Ok(())
    }

    /// `r ← α·r + (1−α)·g²; p ← p − lr·g/(√r + eps)`. A negative `lr`
    /// ascends.
    pub fn rmsprop_step(&mut self, name: &str, p: &mut Tensor, g: &Tensor, lr: f64, cfg: RmsProp) -> Result<()> {
        check(name, p, g)?;
        let r = buffer(&mut self.square_avg, name, p)?;
        for ((pi, ri), gi) in p.data_mut().iter_mut().zip(r.data_mut()).zip(g.data()) {
            *ri = cfg.alpha * *ri + (1.0 - cfg.alpha) * gi * gi;
            *pi -= lr * gi / (ri.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// Drops the buffers of every parameter whose name starts with `prefix`.
    pub fn reset(&mut self, prefix: &str) {
        self.momentum.retain(|k, _| !k.starts_with(prefix));
        self.square_avg.retain(|k, _| !k.starts_with(prefix));
    }
}
