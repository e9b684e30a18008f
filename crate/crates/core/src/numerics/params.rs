use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
}

impl Parameter {
    fn new(name: String, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.dims());
        Parameter {
            name,
            grad: zeros.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            value,
        }
    }
}

/// Named, ordered collection of learnable tensors plus optimizer state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
    /// Number of Adam steps taken so far.
    pub(crate) step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Replace a parameter's value, keeping its shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if !p.value.same_shape(&value) {
            return Err(Error::shape(format!(
                "parameter {} has dims {:?}, new value {:?}",
                p.name,
                p.value.dims(),
                value.dims()
            )));
        }
        p.value = value;
        Ok(())
    }

    /// Round every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
