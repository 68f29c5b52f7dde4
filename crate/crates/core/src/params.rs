//! Ordered, named collections of parameter tensors.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Matrix, Tape, Var};

/// Named tensors in a fixed insertion order.
///
/// The order is what optimizer state, checkpoints and gradient vectors are
/// aligned on, so it must not depend on anything but the configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// A store with the same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            out.insert(n, Matrix::zeros(v.rows(), v.cols()));
        }
        out
    }

    /// Copies every entry of `other` in under `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (n, v) in other.iter() {
            self.insert(format!("{prefix}{n}"), v.clone());
        }
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn sub_store(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, v) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Checks names and shapes agree with `other`.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Config("parameter name lists differ".into()));
        }
        for (n, (a, b)) in self.names.iter().zip(self.values.iter().zip(&other.values)) {
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "param_store",
                    format!("`{n}` is {:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
        }
        Ok(())
    }

    /// `self += s * other`, matched by position.
    pub fn axpy(&mut self, s: f64, other: &ParamStore) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.axpy(s, b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v = v.scale(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .map(|m| m.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }

    /// Registers every entry as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Registers every entry as a constant on `tape`.
    pub fn bind_frozen(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.values.iter().map(|v| tape.constant(v.clone())).collect(),
            index: self.index.clone(),
        }
    }

    /// Gathers the adjoints of a bound store into a store of gradients.
    pub fn collect_grads(&self, bound: &BoundParams, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, &v) in self.names.iter().zip(&bound.vars) {
            out.insert(n.clone(), grads.wrt(v));
        }
        out
    }
}

/// Tape handles for a [`ParamStore`], looked up by name.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Internal(format!("parameter `{name}` not bound")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Uniform on `[-bound, bound]`.
pub fn uniform_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}
