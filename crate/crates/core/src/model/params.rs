use serde::{Deserialize, Serialize};

/// One named weight array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip)]
    pub values: Vec<f32>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered collection of named weight arrays. The order is fixed by the
/// architecture and is part of the checkpoint contract.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: Vec<ParamTensor>,
}

impl ModelParams {
    pub fn new(tensors: Vec<ParamTensor>) -> Self {
        ModelParams { tensors }
    }

    /// Same names and shapes, all values zero. Used for gradient buffers.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(ParamTensor::len).sum()
    }

    pub fn tensors(&self) -> &[ParamTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<ParamTensor> {
        self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn values(&self, index: usize) -> &[f32] {
        &self.tensors[index].values
    }

    pub fn values_mut(&mut self, index: usize) -> &mut [f32] {
        &mut self.tensors[index].values
    }

    pub fn fill(&mut self, v: f32) {
        for t in &mut self.tensors {
            t.values.fill(v);
        }
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|t| t.values.iter().any(|v| !v.is_finite()))
            .map(|t| t.name.as_str())
    }

    /// True when names and shapes agree with `other`.
    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    /// Bitwise equality of every value (distinguishes `-0.0` from `0.0`).
    pub fn bit_identical(&self, other: &ModelParams) -> bool {
        self.same_layout(other)
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.values
                    .iter()
                    .zip(&b.values)
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
