use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tape::Gradients;
use crate::nn::tensor::Tensor;

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
}

/// Named parameters plus Adam state. Iteration order is the lexicographic
/// name order, which is also the serialization order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    moments: BTreeMap<String, Moments>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let moments = Moments { first: Tensor::zeros(value.shape()), second: Tensor::zeros(value.shape()) };
        self.moments.insert(name.clone(), moments);
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.moments.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Rebuild a store from serialized parts, checking the moment shapes.
    pub fn from_parts(
        entries: BTreeMap<String, Tensor>,
        moments: BTreeMap<String, Moments>,
        step: u64,
    ) -> Result<Self> {
        if entries.len() != moments.len() {
            return Err(Error::InvalidArgument("parameter and moment sets differ".into()));
        }
        for (name, p) in &entries {
            let m =
                moments.get(name).ok_or_else(|| Error::InvalidArgument(format!("no optimizer state for {name:?}")))?;
            if m.first.shape() != p.shape() || m.second.shape() != p.shape() {
                return Err(Error::shape("param_store", format!("moment shape mismatch for {name:?}")));
            }
        }
        Ok(Self { entries, moments, step })
    }

    /// SHA-256 over names, shapes and parameter bits (optimizer state excluded).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.entries {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u32).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One Adam update with bias correction. Parameters without a gradient
    /// entry are updated as if their gradient were zero.
    pub fn adam_step(&mut self, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = self
                .entries
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name:?}")))?;
            if g.shape() != p.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        for (name, p) in self.entries.iter_mut() {
            let m = self.moments.get_mut(name).expect("moments exist for every entry");
            let g = grads.get(name);
            let (first, second) = (m.first.data_mut(), m.second.data_mut());
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                first[i] = b1 * first[i] + (1.0 - b1) * gi;
                second[i] = b2 * second[i] + (1.0 - b2) * gi * gi;
                let mhat = first[i] as f64 / bc1;
                let vhat = second[i] as f64 / bc2;
                p.data_mut()[i] -= (cfg.lr as f64 * mhat / (vhat.sqrt() + cfg.eps as f64)) as f32;
            }
        }
        Ok(())
    }
}
