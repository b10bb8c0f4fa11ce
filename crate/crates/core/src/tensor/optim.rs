//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TensorError};
use crate::params::{Grads, ParamStore};

/// Linear warmup from 0 to the peak over `warmup_steps`, then cosine decay
/// to the floor at `total_steps`. Steps are 1-based optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn from_fraction(total_steps: u64, warmup_frac: f64) -> Self {
        Self {
            warmup_steps: (total_steps as f64 * warmup_frac).round() as u64,
            total_steps,
        }
    }

    pub fn lr(&self, step: u64, peak: f64, floor: f64) -> f64 {
        let w = self.warmup_steps;
        if w > 0 && step <= w {
            return peak * step as f64 / w as f64;
        }
        if self.total_steps <= w {
            return peak;
        }
        let progress = ((step - w) as f64 / (self.total_steps - w) as f64).min(1.0);
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr_min: f64,
    pub schedule: LrSchedule,
}

/// A set of parameters sharing a peak learning rate and weight decay.
/// Decay is only applied to parameters of rank ≥ 2.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    groups: Vec<ParamGroup>,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, groups: Vec<ParamGroup>, store: &ParamStore) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for g in &groups {
            for name in &g.names {
                let n = store.get(name)?.len();
                let fresh = Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                };
                if moments.insert(name.clone(), fresh).is_some() {
                    return Err(TensorError::Contract(format!(
                        "parameter {name} appears in two optimizer groups"
                    )));
                }
            }
        }
        Ok(Self {
            config,
            groups,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores a saved step counter and moment buffers.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, Moments>) -> Result<()> {
        for (name, cur) in &self.moments {
            let saved = moments
                .get(name)
                .ok_or_else(|| TensorError::Contract(format!("no saved moments for {name}")))?;
            if saved.m.len() != cur.m.len() || saved.v.len() != cur.v.len() {
                return Err(TensorError::Contract(format!(
                    "moment shape drift for {name}"
                )));
            }
        }
        if moments.len() != self.moments.len() {
            return Err(TensorError::Contract(
                "saved moments cover other parameters".into(),
            ));
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }

    /// Learning rate the next update of `group` will use.
    pub fn next_lr(&self, group: usize) -> f64 {
        self.config.schedule.lr(
            self.step + 1,
            self.groups[group].lr_peak,
            self.config.lr_min,
        )
    }

    /// One update over every grouped parameter that has a gradient. Returns
    /// the learning rate of the first group.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads) -> Result<f64> {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut first_lr = None;
        for group in &self.groups {
            let lr = c.schedule.lr(self.step, group.lr_peak, c.lr_min);
            first_lr.get_or_insert(lr);
            for name in &group.names {
                let Some(g) = grads.get(name) else { continue };
                let w = store.get_mut(name)?;
                let mo = self
                    .moments
                    .get_mut(name)
                    .expect("moments created with the group");
                if g.len() != w.len() || mo.m.len() != w.len() {
                    return Err(TensorError::Contract(format!(
                        "optimizer state for {name} no longer matches the parameter shape"
                    )));
                }
                let decay = if w.shape().len() >= 2 {
                    group.weight_decay
                } else {
                    0.0
                };
                for (((wi, &gi), mi), vi) in w
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(mo.m.iter_mut())
                    .zip(mo.v.iter_mut())
                {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                    let mhat = *mi / bc1;
                    let vhat = *vi / bc2;
                    *wi -= lr * decay * *wi;
                    *wi -= lr * mhat / (vhat.sqrt() + c.eps);
                }
            }
        }
        Ok(first_lr.unwrap_or(0.0))
    }
}
