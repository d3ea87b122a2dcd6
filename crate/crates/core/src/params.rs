//! Parameter storage, spectral normalization state and per-step binding.
//!
//! Networks own a [`ParamStore`] of plain tensors and refer to entries by
//! [`ParamId`]. A forward pass works on a [`Bound`] view that wraps each
//! parameter in a [`Var`] and applies spectral normalization once, so every
//! generator pass inside a training step sees the same normalized weights.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Persistent singular-vector estimates for one weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIteration<T: Scalar> {
    /// Left singular vector, `[rows]`.
    pub u: Tensor<T>,
    /// Right singular vector, `[cols]`.
    pub v: Tensor<T>,
}

fn normalized<T: Scalar>(t: Tensor<T>) -> Tensor<T> {
    let norm = t.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    let eps = T::lit(1e-12);
    t.map(|x| x / (norm + eps))
}

fn as_matrix<T: Scalar>(weight: &Tensor<T>) -> Tensor<T> {
    let rows = weight.shape()[0];
    weight
        .reshape(&[rows, weight.numel() / rows])
        .expect("weight reshapes to a matrix")
}

impl<T: Scalar> PowerIteration<T> {
    pub fn new(weight: &Tensor<T>, rng: &mut impl Rng) -> Self {
        let m = as_matrix(weight);
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let u = normalized(Tensor::from_fn(&[rows], |_| {
            T::lit(StandardNormal.sample(rng))
        }));
        let mut state = PowerIteration {
            u,
            v: Tensor::zeros(&[cols]),
        };
        state.solve(weight);
        state
    }

    /// Sets `u`, `v` to the leading singular pair of `weight`, found as the
    /// top eigenvector of the smaller Gram matrix. The sign follows the
    /// previous `u`; an all-zero weight leaves the state as it is.
    pub fn solve(&mut self, weight: &Tensor<T>) {
        let m = as_matrix(weight);
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let wide = rows <= cols;
        let gram = tensor::matmul(&m, &m, !wide, wide).expect("gram matrix");
        let n = gram.shape()[0];
        let g = DMatrix::from_iterator(n, n, gram.data().iter().map(|v| v.as_f64()));
        let eig = SymmetricEigen::new(g);
        let (k, &top) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty weight");
        if top.is_nan() || top <= 0.0 {
            return;
        }
        let leading = Tensor::from_fn(&[n], |i| T::lit(eig.eigenvectors[(i, k)]));
        let (mut u, mut v) = if wide {
            let v = tensor::matmul(&m, &leading.reshape(&[rows, 1]).unwrap(), true, false).expect("W^T u");
            (leading, normalized(v.reshape(&[cols]).unwrap()))
        } else {
            let u = tensor::matmul(&m, &leading.reshape(&[cols, 1]).unwrap(), false, false).expect("W v");
            (normalized(u.reshape(&[rows]).unwrap()), leading)
        };
        let agreement: T = u.data().iter().zip(self.u.data()).map(|(&a, &b)| a * b).sum();
        if agreement < T::zero() {
            u = u.map(|x| -x);
            v = v.map(|x| -x);
        }
        self.u = u;
        self.v = v;
    }

    /// One power iteration: `v <- W^T u / |W^T u|`, `u <- W v / |W v|`.
    pub fn step(&mut self, weight: &Tensor<T>) {
        let m = as_matrix(weight);
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let u = self.u.reshape(&[rows, 1]).expect("u matches rows");
        let v = tensor::matmul(&m, &u, true, false).expect("W^T u");
        let v = normalized(v.reshape(&[cols]).unwrap());
        let u = tensor::matmul(&m, &v.reshape(&[cols, 1]).unwrap(), false, false).expect("W v");
        self.u = normalized(u.reshape(&[rows]).unwrap());
        self.v = v;
    }

    /// Current estimate `u^T W v` of the largest singular value.
    pub fn sigma(&self, weight: &Tensor<T>) -> T {
        let m = as_matrix(weight);
        let wv = tensor::matmul(&m, &self.v.reshape(&[self.v.numel(), 1]).unwrap(), false, false)
            .expect("W v");
        wv.data().iter().zip(self.u.data()).map(|(&a, &b)| a * b).sum()
    }
}

/// `weight / sigma(weight)`, with `sigma = u^T W v` differentiable in `weight`
/// and `u`, `v` held constant.
///
/// With `update` the estimates first advance by `iterations` power iterations.
pub fn spectral_normalize<T: Scalar>(
    weight: &Var<T>,
    state: &mut PowerIteration<T>,
    update: bool,
    iterations: usize,
) -> Var<T> {
    if update {
        for _ in 0..iterations {
            state.step(weight.value());
        }
    }
    normalize_with(weight, state)
}

fn normalize_with<T: Scalar>(weight: &Var<T>, state: &PowerIteration<T>) -> Var<T> {
    let rows = weight.shape()[0];
    let cols = weight.value().numel() / rows;
    let m = weight.reshape(&[rows, cols]);
    let v = Var::constant(state.v.reshape(&[cols, 1]).unwrap());
    let u = Var::constant(state.u.reshape(&[rows, 1]).unwrap());
    let sigma = m.matmul(&v).mul(&u).sum();
    // the offset keeps an all-zero weight at zero instead of 0/0
    weight.div(&sigma.add_scalar(T::lit(1e-12)))
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub spectral: Option<PowerIteration<T>>,
}

/// All trainable tensors of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: Vec<ParamEntry<T>>,
}

/// How a [`ParamStore`] is turned into graph variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Parameters receive gradients and power iterations advance one step.
    Train,
    /// Parameters are constants and the stored singular vectors are used as is.
    Frozen,
}

/// Graph view of a [`ParamStore`] for one step.
pub struct Bound<T: Scalar> {
    raw: Vec<Var<T>>,
    effective: Vec<Var<T>>,
}

impl<T: Scalar> Bound<T> {
    /// The weight as used by layers (spectrally normalized where configured).
    pub fn get(&self, id: ParamId) -> &Var<T> {
        &self.effective[id.0]
    }

    /// The underlying leaf variable.
    pub fn raw(&self, id: ParamId) -> &Var<T> {
        &self.raw[id.0]
    }

    pub fn leaves(&self) -> Vec<&Var<T>> {
        self.raw.iter().collect()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            spectral: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_spectral(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        rng: &mut impl Rng,
    ) -> ParamId {
        let state = PowerIteration::new(&value, rng);
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            spectral: Some(state),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    /// Replaces a parameter value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn bind(&mut self, mode: BindMode) -> Bound<T> {
        let train = mode == BindMode::Train;
        let mut raw = Vec::with_capacity(self.entries.len());
        let mut effective = Vec::with_capacity(self.entries.len());
        for entry in &mut self.entries {
            let leaf = if train {
                Var::param(entry.value.clone())
            } else {
                Var::constant(entry.value.clone())
            };
            let eff = match &mut entry.spectral {
                Some(state) => spectral_normalize(&leaf, state, train, 1),
                None => leaf.clone(),
            };
            raw.push(leaf);
            effective.push(eff);
        }
        Bound { raw, effective }
    }

    /// Constant view for inference; never touches the power-iteration state.
    pub fn bind_frozen(&self) -> Bound<T> {
        self.bind_frozen_with(None)
    }

    /// Frozen view in which one parameter is replaced by a caller-supplied
    /// variable (for example a probe leaf in a gradient check).
    pub fn bind_frozen_with(&self, replace: Option<(ParamId, Var<T>)>) -> Bound<T> {
        let mut raw = Vec::with_capacity(self.entries.len());
        let mut effective = Vec::with_capacity(self.entries.len());
        for (i, entry) in self.entries.iter().enumerate() {
            let leaf = match &replace {
                Some((id, v)) if id.0 == i => v.clone(),
                _ => Var::constant(entry.value.clone()),
            };
            let eff = match &entry.spectral {
                Some(state) => normalize_with(&leaf, state),
                None => leaf.clone(),
            };
            raw.push(leaf);
            effective.push(eff);
        }
        Bound { raw, effective }
    }

    /// Re-solves the singular vectors of every spectrally normalized entry
    /// for its current weight.
    pub fn refresh_spectral(&mut self) {
        for e in &mut self.entries {
            if let Some(state) = &mut e.spectral {
                state.solve(&e.value);
            }
        }
    }

    /// Effective (normalized) weight of every spectrally normalized entry.
    pub fn effective_weights(&self) -> Vec<(String, Tensor<T>)> {
        let bound = self.bind_frozen();
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.spectral.is_some())
            .map(|(i, e)| (e.name.clone(), bound.effective[i].value().clone()))
            .collect()
    }
}

/// He-normal initialisation for a weight with `fan_in` inputs per output.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}
