//! Named parameter storage, binding parameters onto a tape, and initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, named trainable tensors of one sub-network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on `tape` as a gradient-requiring leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    pub fn bind_with(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.value.clone(), requires_grad))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

/// Tape handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients after `backward`; parameters the loss does not reach get zeros.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> Vec<Vec<T>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map_or_else(|| vec![T::zero(); tape.value(v).numel()], <[T]>::to_vec)
            })
            .collect()
    }
}

/// Centered uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn uniform_fan_in<T: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::of(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches generated length")
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1, marked uninitialized until a train-mode update.
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            initialized: false,
        }
    }

    /// Explicitly accepts the mean 0 / variance 1 defaults for eval mode.
    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    pub fn update(&mut self, batch: &BatchStats<T>) -> Result<()> {
        if batch.mean.len() != self.mean.len() || batch.var.len() != self.var.len() {
            return Err(Error::ShapeMismatch {
                op: "running stats update",
                lhs: vec![self.mean.len()],
                rhs: vec![batch.mean.len()],
            });
        }
        let m = T::of(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + m * b;
        }
        self.initialized = true;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        RunningStats {
            mean: self.mean.iter().map(|&v| U::of(v.to_f64())).collect(),
            var: self.var.iter().map(|&v| U::of(v.to_f64())).collect(),
            initialized: self.initialized,
        }
    }
}
