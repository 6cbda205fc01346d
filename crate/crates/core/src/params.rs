//! Named parameter storage with gradients and trainable flags.
//!
//! Names are hierarchical dotted paths (`enc_ir.db1.conv0.w`), kept in a
//! sorted map so iteration order — and therefore optimizer update order
//! and checkpoint layout — is deterministic.

use std::collections::BTreeMap;

use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a parameter; names must be unique.
    pub fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::argument(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name, ParamEntry { value, grad, trainable });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.numel()).sum()
    }

    /// Sorted iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))?;
        if e.grad.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient shape {:?} != parameter shape {:?} for `{name}`",
                g.shape(),
                e.grad.shape()
            )));
        }
        for (dst, src) in e.grad.data_mut().iter_mut().zip(g.data()) {
            *dst += src;
        }
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter `{name}`")))?;
        e.trainable = trainable;
        Ok(())
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, e) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                e.trainable = false;
            }
        }
    }

    /// Move all entries of `other` into `self`; duplicate names error.
    pub fn absorb(&mut self, other: ParamStore) -> Result<()> {
        for (name, entry) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::argument(format!("duplicate parameter name `{name}`")));
            }
            self.entries.insert(name, entry);
        }
        Ok(())
    }
}

/// Standard normal sample via Box-Muller on the uniform generator, so the
/// only RNG state is the ChaCha stream (easy to persist in checkpoints).
pub fn normal_sample(rng: &mut ChaCha20Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1]
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// He-normal initialization: `N(0, sqrt(2 / fan_in)) * gain`.
pub fn he_normal(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt() * gain;
    Tensor::from_fn(shape, |_| normal_sample(rng) * std)
}

/// Xavier/Glorot-normal initialization: `N(0, sqrt(2 / (fan_in + fan_out)))`.
pub fn xavier_normal(rng: &mut ChaCha20Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| normal_sample(rng) * std)
}
