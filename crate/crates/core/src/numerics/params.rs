use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Slot {
    value: Tensor,
    grad: Tensor,
    first_moment: Tensor,
    second_moment: Tensor,
}

/// Named trainable tensors with gradient accumulators and Adam state.
///
/// Iteration order is the lexicographic order of names, which keeps
/// serialization and fingerprints canonical.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    slots: BTreeMap<String, Slot>,
    step: u64,
}

/// Serialized form of a single parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let zeros = Tensor::zeros(value.shape());
        self.slots.insert(
            name.into(),
            Slot {
                grad: zeros.clone(),
                first_moment: zeros.clone(),
                second_moment: zeros,
                value,
            },
        );
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.value)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter value; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.value.shape() != value.shape() {
            return Err(Error::invalid(format!(
                "parameter {name}: shape {:?} != {:?}",
                value.shape(),
                slot.value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.slots
            .get(name)
            .map(|s| &s.grad)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))?;
        if slot.grad.len() != grad.len() {
            return Err(Error::invalid(format!("gradient shape mismatch for {name}")));
        }
        slot.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in self.slots.values_mut() {
            slot.grad.values_mut().fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.value))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.values().map(|s| s.value.len()).sum()
    }

    /// Number of optimizer steps applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn to_named(&self) -> BTreeMap<String, NamedTensor> {
        self.slots
            .iter()
            .map(|(k, s)| {
                (
                    k.clone(),
                    NamedTensor {
                        shape: s.value.shape().to_vec(),
                        values: s.value.values().to_vec(),
                    },
                )
            })
            .collect()
    }

    pub fn from_named(named: BTreeMap<String, NamedTensor>, step: u64) -> Result<Self> {
        let mut store = Self::new();
        for (name, t) in named {
            let value = Tensor::new(t.shape, t.values)?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("stored parameter {name}")));
            }
            store.insert(name, value);
        }
        store.step = step;
        Ok(store)
    }
}

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&self, store: &mut ParamStore) -> Result<()> {
        for (name, slot) in &store.slots {
            if !slot.grad.is_finite() {
                return Err(Error::Numeric(format!("gradient of {name}")));
            }
        }
        store.step += 1;
        let t = store.step as f64;
        let bias1 = 1.0 - self.beta1.powf(t);
        let bias2 = 1.0 - self.beta2.powf(t);
        for slot in store.slots.values_mut() {
            let grads = slot.grad.values();
            let m = slot.first_moment.values_mut();
            for (mi, &g) in m.iter_mut().zip(grads) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            }
            let v = slot.second_moment.values_mut();
            for (vi, &g) in v.iter_mut().zip(grads) {
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            }
            let m = slot.first_moment.values();
            let v = slot.second_moment.values();
            for ((w, &mi), &vi) in slot.value.values_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *w -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        store.zero_grad();
        Ok(())
    }
}
