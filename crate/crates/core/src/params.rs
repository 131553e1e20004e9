use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim("param set", self.values[id.0].shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Puts parameter `id` on the tape (once per tape).
    pub fn var(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(id.0, &self.values[id.0])
    }

    /// Gradient for every parameter; zeros for those not on the tape.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> Vec<Tensor> {
        self.ids()
            .map(|id| match tape.param_var(id.0) {
                Some(v) => grads.get(v),
                None => Tensor::zeros(self.values[id.0].shape()),
            })
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}
