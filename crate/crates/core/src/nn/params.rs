use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};

/// A named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered collection of named parameter tensors.
///
/// Values produced by initialization and by [`super::Adam`] are always exactly
/// representable as `f32`, so they survive the checkpoint format unchanged.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NetworkParams {
    tensors: Vec<NamedTensor>,
}

/// Gradients aligned index-for-index with [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub values: Vec<Vec<f64>>,
}

impl ParamGrads {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            values: params.iter().map(|t| vec![0.0; t.values.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.values.iter_mut().flatten() {
            *v *= s;
        }
    }
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(shape_err(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(shape_err(format!(
                "parameter {name}: shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        self.tensors.push(NamedTensor { name, shape, values });
        Ok(())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| shape_err(format!("network has no parameter named {name}")))
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }
}

/// Fan-in scaled uniform initializer, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) struct ParamInit<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub params: NetworkParams,
}

impl ParamInit<'_> {
    pub fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let fan_in = c_in * k * k;
        self.uniform(&format!("{name}.weight"), vec![c_out, c_in, k, k], fan_in)?;
        self.uniform(&format!("{name}.bias"), vec![c_out], fan_in)
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.uniform(&format!("{name}.weight"), vec![d_out, d_in], d_in)?;
        self.uniform(&format!("{name}.bias"), vec![d_out], d_in)
    }

    fn uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<()> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| f64::from(self.rng.random_range(-bound..bound) as f32))
            .collect();
        self.params.push(name, shape, values)
    }
}
