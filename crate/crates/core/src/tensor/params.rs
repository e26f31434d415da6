use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::BTreeMap;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

pub type Grads = BTreeMap<String, Array2<f64>>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Gaussian init scaled by `gain / sqrt(fan_in)`.
    pub fn init_linear<R: Rng>(&mut self, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut R) {
        let std = gain / (fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    /// Record every parameter on `tape`. Names starting with any of the
    /// `frozen` prefixes become constants.
    pub fn bind(&self, tape: &mut Tape, frozen: &[&str]) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if frozen.iter().any(|p| k.starts_with(p)) {
                    tape.constant(v.clone())
                } else {
                    tape.leaf(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    /// Zero-filled gradient map with the store's shapes.
    pub fn zeros_like(&self) -> Grads {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), Array2::zeros(v.dim())))
            .collect()
    }
}

/// Parameters recorded on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Wrap vars already on a tape, e.g. leaves built by a gradient check.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// Gradients of every bound parameter; zeros where backward did not reach.
    pub fn grads(&self, tape: &Tape) -> Grads {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = tape
                    .grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.shape(*v)));
                (k.clone(), g)
            })
            .collect()
    }
}

pub fn accumulate(into: &mut Grads, from: &Grads) {
    for (k, g) in from {
        match into.get_mut(k) {
            Some(acc) => *acc += g,
            None => {
                into.insert(k.clone(), g.clone());
            }
        }
    }
}
