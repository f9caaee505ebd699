//! Named trainable parameters, their gradients, and initialisation.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Parameter leaves of one graph, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binds externally created leaves, in [`ParamStore`] order.
    pub fn new(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        if self.names.iter().any(|n| n == name) {
            return Err(TensorError::Param(format!("duplicate parameter {name}")));
        }
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn grads(&self) -> &[Tensor<T>] {
        &self.grads
    }

    pub(crate) fn values_and_grads_mut(&mut self) -> (&mut [Tensor<T>], &[Tensor<T>]) {
        (&mut self.values, &self.grads)
    }

    /// Registers every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.param(v.clone())).collect(),
        }
    }

    /// Registers every parameter as a constant of `g` (inference).
    pub fn bind_frozen(&self, g: &Graph<T>) -> Bound {
        Bound {
            vars: self.values.iter().map(|v| g.constant(v.clone())).collect(),
        }
    }

    /// Gradients of one finished backward pass; untouched parameters get zeros.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.values)
            .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Adds `scale * grads[i]` into each stored gradient.
    pub fn accumulate_grads(&mut self, grads: &[Tensor<T>], scale: T) {
        assert_eq!(grads.len(), self.grads.len());
        for (acc, g) in self.grads.iter_mut().zip(grads) {
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v * scale;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn to_named(&self) -> IndexMap<String, Tensor<T>> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Overwrites values from a named collection; names and shapes must match exactly.
    pub fn load_named(&mut self, named: &IndexMap<String, Tensor<T>>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(TensorError::Param(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                self.names.len()
            )));
        }
        for (i, name) in self.names.iter().enumerate() {
            let t = named
                .get(name)
                .ok_or_else(|| TensorError::Param(format!("checkpoint lacks parameter {name}")))?;
            if t.shape() != self.values[i].shape() {
                return Err(TensorError::Param(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.values[i].shape()
                )));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// He-style uniform initialisation, `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-bound..bound)))
}
