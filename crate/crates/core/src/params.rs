//! Named trainable parameters with gradient buffers.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    #[serde(skip)]
    pub grad: Option<Tensor>,
    pub frozen: bool,
}

/// Owner of every parameter tensor of a model.
///
/// Registration order is deterministic for a given configuration, so a store
/// rebuilt from the same config lines up index-for-index with a saved one.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub const fn empty() -> Self {
        Self { params: Vec::new() }
    }

    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        !self.params[id.0].frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Freezes every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    /// Sets every trainable gradient to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = if p.frozen {
                None
            } else {
                Some(Tensor::zeros(p.value.rows(), p.value.cols()))
            };
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `scale · grads` into the trainable gradient buffers.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            match &mut p.grad {
                Some(buf) => buf.add_scaled(g, scale),
                None => {
                    let mut buf = Tensor::zeros(g.rows(), g.cols());
                    buf.add_scaled(g, scale);
                    p.grad = Some(buf);
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// SHA-256 over names and exact bit patterns of every parameter matching `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: expected {}, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match saved `{}` {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Copies the values of every parameter under `prefix` from `other`,
    /// which must hold the same such parameters in the same order.
    pub fn load_prefix(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        let src: Vec<&Param> = other.params.iter().filter(|p| p.name.starts_with(prefix)).collect();
        let dst: Vec<&mut Param> = self.params.iter_mut().filter(|p| p.name.starts_with(prefix)).collect();
        if src.len() != dst.len() {
            return Err(Error::Checkpoint(format!(
                "`{prefix}` parameter count mismatch: expected {}, found {}",
                dst.len(),
                src.len()
            )));
        }
        for (d, s) in dst.into_iter().zip(src) {
            if d.name != s.name || d.value.shape() != s.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{}` {:?} does not match saved `{}` {:?}",
                    d.name,
                    d.value.shape(),
                    s.name,
                    s.value.shape()
                )));
            }
            d.value = s.value.clone();
        }
        Ok(())
    }
}
