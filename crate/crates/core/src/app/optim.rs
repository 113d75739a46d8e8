//! Adam with decoupled weight decay, global-norm clipping and a
//! warm-up/cosine step-size schedule.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::OptimConfig;
use crate::error::{Error, Result};

pub struct Adam {
    config: OptimConfig,
    total_steps: usize,
    vars: BTreeMap<String, Var>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: usize,
}

const MOMENT_M: &str = "adam.m.";
const MOMENT_V: &str = "adam.v.";

impl Adam {
    pub fn new(vars: &BTreeMap<String, Var>, config: OptimConfig, total_steps: usize) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in vars {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self {
            config,
            total_steps: total_steps.max(1),
            vars: vars.clone(),
            m,
            v,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Step size for 0-based update `step`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let c = &self.config;
        let warmup = (c.warmup_fraction * self.total_steps as f64).round() as usize;
        if step < warmup {
            return c.lr * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.total_steps - warmup).max(1) as f64;
        let progress = ((step - warmup) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        c.lr * (c.final_lr_fraction + (1.0 - c.final_lr_fraction) * cosine)
    }

    /// Applies one update; returns the pre-clipping gradient norm.
    pub fn step(&mut self, grads: &GradStore) -> Result<f64> {
        let c = self.config.clone();
        let mut sq = 0.0;
        let mut gs = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                gs.insert(name.clone(), g.clone());
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Contract(format!("non-finite gradient norm {norm}")));
        }
        let scale = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.learning_rate(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in gs {
            let var = &self.vars[&name];
            // moments must not hold on to this step's graph
            let g = (g.detach() * scale)?;
            let m = ((&self.m[&name] * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            let v = ((&self.v[&name] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + c.eps)?)?;
            let current = var.as_tensor().detach();
            let mut next = (&current - (update * lr)?)?;
            if c.weight_decay > 0.0 {
                next = (next - (current * (lr * c.weight_decay))?)?;
            }
            var.set(&next)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
        }
        Ok(norm)
    }

    /// Moment tensors for checkpointing.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("{MOMENT_M}{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{MOMENT_V}{k}"), t.clone());
        }
        out
    }

    pub fn load_state(
        &mut self,
        tensors: &std::collections::HashMap<String, Tensor>,
        step: usize,
    ) -> Result<()> {
        for name in self.vars.keys() {
            for (prefix, store) in [(MOMENT_M, &mut self.m), (MOMENT_V, &mut self.v)] {
                let key = format!("{prefix}{name}");
                let t = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Contract(format!("checkpoint lacks optimizer state `{key}`")))?;
                let cur = &store[name];
                store.insert(name.clone(), t.to_dtype(cur.dtype())?.to_device(cur.device())?);
            }
        }
        self.step = step;
        Ok(())
    }
}
