use std::collections::HashMap;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor2D;
use crate::{Error, Result};

/// Handle to a named parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor2D>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter `{name}`"
            )));
        }
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    /// Inserts a `fan_in x fan_out` weight drawn from
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor2D::uniform(rows, cols, bound, rng))
    }

    /// Inserts a `fan_in x fan_out` weight drawn from
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))` (He uniform), which keeps the
    /// activation scale roughly constant through SiLU layers.
    pub fn insert_he_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.insert(name, Tensor2D::uniform(rows, cols, bound, rng))
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2D)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor2D::len).sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor2D) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(
                "ParamStore::set",
                format!(
                    "`{}` is {:?}, got {:?}",
                    self.names[id.0],
                    self.values[id.0].shape(),
                    value.shape()
                ),
            ));
        }
        self.values[id.0] = value;
        Ok(())
    }
}

/// A tape bound to a parameter store: parameters become leaves on first use.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor2D) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        self.tape.value(v)
    }

    /// Gradient for every parameter; unused parameters get zeros.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor2D> {
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.wrt(v).cloned())
                    .unwrap_or_else(|| {
                        let (r, c) = self.store.get(id).shape();
                        Tensor2D::zeros(r, c)
                    })
            })
            .collect()
    }
}
