//! Adam with bias correction over a [`ParamStore`].

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    /// `lr = 0` is accepted so that a run can be frozen for debugging.
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr.is_finite()
            && self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!(
                "optimizer needs lr >= 0, betas in [0, 1), eps > 0, weight_decay >= 0; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// One Adam step on a tensor; `t` is the 1-based step count after this update.
/// Returns `(param', m', v')`.
pub fn adam_update(
    param: &Tensor,
    grad: &Tensor,
    m: &Tensor,
    v: &Tensor,
    t: u64,
    cfg: &OptimizerConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let grad = if cfg.weight_decay != 0.0 {
        (grad + param.affine(cfg.weight_decay, 0.0)?)?
    } else {
        grad.clone()
    };
    let m = (m.affine(cfg.beta1, 0.0)? + grad.affine(1.0 - cfg.beta1, 0.0)?)?;
    let v = (v.affine(cfg.beta2, 0.0)? + grad.sqr()?.affine(1.0 - cfg.beta2, 0.0)?)?;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let denom = (v.affine(1.0 / bc2, 0.0)?.sqrt()? + cfg.eps)?;
    let step = m.affine(cfg.lr / bc1, 0.0)?.div(&denom)?;
    Ok(((param - step)?, m, v))
}

/// Per-network optimizer state: step count and both moments per parameter.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: OptimizerConfig,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut m = BTreeMap::new();
        for (name, var) in params.trainable() {
            m.insert(name.to_string(), var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        })
    }

    /// Applies one update to every parameter that received a gradient.
    pub fn apply(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        for (name, var) in params.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = (&self.m[name], &self.v[name]);
            let (p, m, v) = adam_update(&var.as_tensor().detach(), &g.detach(), m, v, self.step, &self.config)?;
            var.set(&p)?;
            self.m.insert(name.to_string(), m.detach());
            self.v.insert(name.to_string(), v.detach());
        }
        Ok(())
    }

    /// `(m.<name>, tensor)` and `(v.<name>, tensor)` pairs.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("m.{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("v.{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn restore(&mut self, step: u64, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (kind, map) in [("m", &mut self.m), ("v", &mut self.v)] {
            for (name, t) in map.iter_mut() {
                let key = format!("{kind}.{name}");
                let saved = lookup(&key).ok_or_else(|| Error::CorruptCheckpoint(format!("missing optimizer tensor {key}")))?;
                if saved.dims() != t.dims() {
                    return Err(Error::CorruptCheckpoint(format!(
                        "optimizer tensor {key}: shape {:?}, expected {:?}",
                        saved.dims(),
                        t.dims()
                    )));
                }
                *t = saved.to_dtype(t.dtype())?;
            }
        }
        self.step = step;
        Ok(())
    }
}
