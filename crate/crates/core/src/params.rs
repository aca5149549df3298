use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            value,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.entries[index].value
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.entries[index].value
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    /// Replaces every tensor, keeping names. Shapes must match.
    pub fn set_tensors(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Length(format!(
                "expected {} tensors, got {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for (entry, t) in self.entries.iter_mut().zip(tensors) {
            if entry.value.shape() != t.shape() {
                return Err(Error::shape("set_tensors", entry.value.shape(), t.shape()));
            }
            entry.value = t;
        }
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Places every tensor on the tape as a leaf, in order.
    pub fn bind(&self, graph: &mut Graph) -> Vec<Var> {
        self.entries.iter().map(|e| graph.leaf(e.value.clone())).collect()
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            for v in e.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

pub(crate) fn grads_of(graph: &Graph, vars: &[Var]) -> Vec<Tensor> {
    vars.iter().map(|&v| graph.grad(v)).collect()
}
