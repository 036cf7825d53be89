//! Named parameter storage shared by the encoder and the head.
//!
//! Parameters live in one ordered [`ParamStore`]; model structs hold
//! [`ParamId`] handles into it. Binding the store to a tape yields
//! [`Bindings`], which map the same handles to tape variables.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_requires_grad(&mut self, id: ParamId, requires_grad: bool) {
        self.params[id.0].tensor.requires_grad = requires_grad;
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn trainable_values(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.tensor.requires_grad)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Records every parameter on `tape` as a borrowed leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a, T>) -> Bindings {
        Bindings(self.params.iter().map(|p| tape.param(&p.tensor)).collect())
    }

    /// Copies gradients from a finished backward pass into the parameters.
    /// Trainable parameters the loss never reached get an all-zero gradient.
    pub fn collect_grads(&mut self, tape: &Tape<'_, T>, bindings: &Bindings) {
        for (p, &v) in self.params.iter_mut().zip(&bindings.0) {
            p.tensor.grad = p.tensor.requires_grad.then(|| {
                tape.grad(v)
                    .map(<[T]>::to_vec)
                    .unwrap_or_else(|| vec![T::zero(); p.tensor.numel()])
            });
        }
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.grad = None);
    }

    /// Replaces a parameter's values, keeping its `requires_grad` flag.
    pub fn assign(&mut self, id: ParamId, values: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.tensor.shape() != values.shape() {
            return Err(Error::Load(format!(
                "{}: expected shape {:?}, got {:?}",
                p.name,
                p.tensor.shape(),
                values.shape()
            )));
        }
        let requires_grad = p.tensor.requires_grad;
        p.tensor = values.with_requires_grad(requires_grad);
        Ok(())
    }
}

/// Tape variables for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl Index<ParamId> for Bindings {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

/// Affine layer `y = x·Wᵀ + b` with `W` stored as `[out × in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Registers `prefix.weight` and `prefix.bias`, both uniform in
    /// `±bound`.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            weight: store.register(format!("{prefix}.weight"), uniform(&[out_dim, in_dim], bound, rng)),
            bias: store.register(format!("{prefix}.bias"), uniform(&[out_dim], bound, rng)),
        }
    }

    /// Registers with the fan-in bound `1/√in_dim`.
    pub fn fan_in<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        out_dim: usize,
        in_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::register(store, prefix, out_dim, in_dim, 1.0 / (in_dim as f64).sqrt(), rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var, binds: &Bindings) -> Result<Var> {
        let y = tape.matmul_bt(x, binds[self.weight])?;
        tape.add_bias(y, binds[self.bias])
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

pub(crate) fn uniform<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-bound..=bound))).collect();
    Tensor::new(shape, data).expect("uniform: positive dimensions")
}
