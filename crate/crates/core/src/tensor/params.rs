use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    value: Tensor,
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Named parameters with per-parameter Adam moments.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
}

/// Tape handles for every parameter in a store.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Collects the gradient of every bound parameter, optionally filtered by name.
    pub fn gradients(
        &self,
        grads: &Gradients,
        keep: impl Fn(&str) -> bool,
    ) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(name, _)| keep(name))
            .map(|(name, &v)| (name.clone(), grads.get(v)))
            .collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let (r, c) = (value.rows(), value.cols());
        self.slots.insert(
            name.into(),
            Slot {
                value,
                m: Tensor::zeros(r, c),
                v: Tensor::zeros(r, c),
                step: 0,
            },
        );
    }

    /// Inserts a parameter drawn from `U(-a, a)` with `a = sqrt(6 / (rows + cols))`.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let a = (6.0 / (rows + cols).max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data).expect("sized"));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.slots
            .get_mut(name)
            .map(|s| &mut s.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.slots.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn step_count(&self, name: &str) -> Result<u64> {
        self.slots
            .get(name)
            .map(|s| s.step)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let vars = self
            .slots
            .iter()
            .map(|(name, slot)| (name.clone(), tape.leaf(slot.value.clone())))
            .collect();
        Bindings { vars }
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.value.clone()))
            .collect()
    }

    pub fn from_values(values: BTreeMap<String, Tensor>) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in values {
            store.insert(k, v);
        }
        store
    }

    /// One bias-corrected Adam update for every parameter named in `grads`.
    pub fn adam_step(&mut self, grads: &BTreeMap<String, Tensor>, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads {
            let slot = self
                .slots
                .get(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if slot.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam",
                    lhs: slot.value.shape(),
                    rhs: g.shape(),
                });
            }
        }
        for (name, g) in grads {
            let slot = self.slots.get_mut(name).expect("checked above");
            slot.step += 1;
            let t = slot.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let params = slot.value.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for i in 0..params.len() {
                let gi = g.data()[i];
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
