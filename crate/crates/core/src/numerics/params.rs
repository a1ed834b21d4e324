use std::collections::HashMap;

use crate::error::{Error, Result};

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Index of a parameter inside a [`Params`] set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named model weights in registration order, each flagged trainable or frozen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    lookup: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    /// Registers a parameter. Panics on a duplicate name; model
    /// construction owns the namespace.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn is_trainable(&self, index: usize) -> bool {
        self.trainable[index]
    }

    pub fn set_trainable(&mut self, index: usize, trainable: bool) {
        self.trainable[index] = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn trainable_count(&self) -> usize {
        (0..self.len()).filter(|&i| self.trainable[i]).map(|i| self.tensors[i].numel()).sum()
    }

    /// Overwrites values from `other`, matching by name. Every parameter
    /// here must be present there with the same shape.
    pub fn load_from(&mut self, other: &[(String, Tensor)]) -> Result<()> {
        let incoming: HashMap<&str, &Tensor> = other.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for i in 0..self.len() {
            let name = &self.names[i];
            let t = incoming.get(name.as_str()).ok_or_else(|| Error::Version(format!("missing tensor {name}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::Version(format!(
                    "tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
        }
        for i in 0..self.len() {
            self.tensors[i] = (*incoming[self.names[i].as_str()]).clone();
        }
        Ok(())
    }

    pub fn to_named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect()
    }
}

/// Binds parameters onto a tape on first use, so a forward pass only
/// records the weights it actually touches.
pub struct Binder<'p> {
    params: &'p Params,
    bound: Vec<Option<Var>>,
    grad_all: bool,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p Params) -> Self {
        Binder { params, bound: vec![None; params.len()], grad_all: false }
    }

    /// Treat frozen parameters as differentiable too (gradient checking).
    pub fn with_all_grads(mut self) -> Self {
        self.grad_all = true;
        self
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.grad_all || self.params.trainable[id.0];
        let v = tape.leaf(self.params.tensors[id.0].clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    /// Per-parameter gradients after `tape.backward`; `None` for parameters
    /// that were frozen or never bound.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.bound.iter().map(|b| b.and_then(|v| tape.grad(v).cloned())).collect()
    }
}

/// Adds `src` into `acc` elementwise, allocating on first contribution.
pub fn accumulate_grads(acc: &mut [Option<Tensor>], src: Vec<Option<Tensor>>) {
    for (a, s) in acc.iter_mut().zip(src) {
        let Some(s) = s else { continue };
        match a {
            Some(a) => a.data_mut().iter_mut().zip(s.data()).for_each(|(x, y)| *x += y),
            None => *a = Some(s),
        }
    }
}
