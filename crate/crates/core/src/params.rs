use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Every learnable tensor of a model, in a fixed order under stable names.
/// The set of parameters cannot change after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new(named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut params: Vec<Param> = Vec::with_capacity(named.len());
        for (name, value) in named {
            if params.iter().any(|p| p.name == name) {
                return Err(Error::Config(format!("duplicate parameter name `{name}`")));
            }
            params.push(Param {
                name,
                value,
                grad: None,
            });
        }
        Ok(Self { params })
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    /// Overwrites the value of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if !p.value.same_shape(&value) {
            return Err(Error::dim(
                "ParamStore::set",
                format!("{:?}", p.value.shape()),
                format!("{:?}", value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
