use std::collections::HashMap;

use super::{Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// A named trainable tensor. The name is a dotted path such as
/// `encoder.stage2.block1.spatial.wq`.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    var: Var,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        self.var.value()
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.var.grad()
    }
}

/// Owns every parameter of a model, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            var: Var::leaf(value),
        });
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    /// Graph handle for use in a forward pass.
    pub fn var(&self, id: ParamId) -> &Var {
        &self.params[id.0].var
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Replaces a parameter's value. The accumulated gradient is discarded.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.var.shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                lhs: p.var.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.var = Var::leaf(value);
        Ok(())
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.var.zero_grad();
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value().len()).sum()
    }
}
