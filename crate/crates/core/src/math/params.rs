use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Same shape as `value` when present.
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, grad: None, trainable: true });
        id
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets every trainable parameter's gradient to zeros; frozen ones to `None`.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = p.trainable.then(|| Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        let g = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (a, b) in g.data_mut().iter_mut().zip(grad) {
            *a += b;
        }
    }

    pub(crate) fn accumulate_rows(&mut self, id: ParamId, rows: &[usize], grad: &[f64]) {
        let p = &mut self.params[id.0];
        let cols = p.value.cols();
        let g = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        let gd = g.data_mut();
        for (k, &r) in rows.iter().enumerate() {
            for (a, b) in gd[r * cols..(r + 1) * cols].iter_mut().zip(&grad[k * cols..(k + 1) * cols]) {
                *a += b;
            }
        }
    }

    /// Concatenation of the listed parameters' gradients (zeros where absent).
    pub fn flat_grad(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in ids {
            let p = &self.params[id.0];
            match &p.grad {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat(0.0).take(p.value.numel())),
            }
        }
        out
    }

    pub fn num_values(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.params[id.0].value.numel()).sum()
    }

    /// Copies values from another store with identical names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .id(&p.name)
                .map(|id| other.value(id))
                .ok_or_else(|| Error::State(format!("parameter {} missing from source", p.name)))?;
            if src.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "parameter {}: shape {:?} vs {:?}",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
