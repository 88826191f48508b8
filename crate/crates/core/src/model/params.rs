use rand::Rng;
use rand_distr::{Distribution, Normal};
use sedd_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    Normal(f64),
    Zeros,
    Ones,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

/// Name, shape and initializer of one parameter.
pub(crate) type ParamSpec = (String, Vec<usize>, ParamInit);

impl<T: Scalar> ParamStore<T> {
    pub(crate) fn init<R: Rng + ?Sized>(spec: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = Self::default();
        for (name, shape, init) in spec {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match *init {
                ParamInit::Zeros => vec![0.0; n],
                ParamInit::Ones => vec![1.0; n],
                ParamInit::Normal(std) => {
                    let d = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| d.sample(rng)).collect()
                }
            };
            store.names.push(name.clone());
            store.tensors.push(Tensor::from_f64(shape, &data).expect("spec shape"));
        }
        store
    }

    pub fn from_named(named: Vec<(String, Tensor<T>)>) -> Self {
        let (names, tensors) = named.into_iter().unzip();
        Self { names, tensors }
    }

    /// Check names and shapes against a spec, in order.
    pub(crate) fn check(&self, spec: &[ParamSpec]) -> Result<()> {
        if spec.len() != self.names.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                spec.len(),
                self.names.len()
            )));
        }
        for ((name, shape, _), (n, t)) in spec.iter().zip(self.names.iter().zip(&self.tensors)) {
            if name != n || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {n} {:?} does not match descriptor entry {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Place every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}
