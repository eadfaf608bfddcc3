use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// A named row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    Zeros,
    Ones,
    /// Normal with variance `1 / fan_in`.
    FanIn(usize),
}

#[derive(Debug, Clone)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Collects parameter declarations while a network layout is assembled.
#[derive(Debug, Default)]
pub(crate) struct ParamBuilder {
    pub specs: Vec<ParamSpec>,
}

impl ParamBuilder {
    pub fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }
}

/// All trainable tensors of a network, in a fixed declaration order. The same
/// type holds gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Params {
    tensors: Vec<NamedTensor>,
}

impl Params {
    pub(crate) fn from_specs(specs: &[ParamSpec], rng: &mut SeededRng) -> Self {
        let tensors = specs
            .iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let values = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::FanIn(fan_in) => {
                        let std = (1.0 / fan_in as f64).sqrt();
                        (0..n).map(|_| rng.normal() * std).collect()
                    }
                };
                NamedTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values,
                }
            })
            .collect();
        Self { tensors }
    }

    /// Accept tensors only if names and shapes match `specs` exactly.
    pub(crate) fn from_tensors(specs: &[ParamSpec], tensors: Vec<NamedTensor>) -> Result<Self> {
        if specs.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                specs.len(),
                tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&tensors) {
            if s.name != t.name || s.shape != t.shape || t.numel() != t.values.len() {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} ({} values) does not match expected {} {:?}",
                    t.name,
                    t.shape,
                    t.values.len(),
                    s.name,
                    s.shape
                )));
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {}", t.name)));
            }
        }
        Ok(Self { tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    values: vec![0.0; t.values.len()],
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<NamedTensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }

    /// Flat views in declaration order.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.values.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.values.iter_mut())
    }

    pub(crate) fn vec(&self, id: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.tensors[id].values[..])
    }

    pub(crate) fn vec_mut(&mut self, id: usize) -> ArrayViewMut1<'_, f64> {
        ArrayViewMut1::from(&mut self.tensors[id].values[..])
    }

    /// Matrix view with the last axis as columns and the rest folded into rows.
    pub(crate) fn mat(&self, id: usize) -> ArrayView2<'_, f64> {
        let t = &self.tensors[id];
        let cols = *t.shape.last().expect("matrix parameters have a shape");
        ArrayView2::from_shape((t.values.len() / cols, cols), &t.values[..]).expect("shape matches storage")
    }

    pub(crate) fn mat_mut(&mut self, id: usize) -> ArrayViewMut2<'_, f64> {
        let t = &mut self.tensors[id];
        let cols = *t.shape.last().expect("matrix parameters have a shape");
        let rows = t.values.len() / cols;
        ArrayViewMut2::from_shape((rows, cols), &mut t.values[..]).expect("shape matches storage")
    }
}
