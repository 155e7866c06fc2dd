use crate::error::{Error, Result};
use crate::numerics::{RngStream, Tensor};
use crate::scalar::Scalar;

/// Ordered, named collection of weight tensors. Gradients use the same type
/// with identical names and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Appends a tensor with `N(0, std²)` entries.
    pub fn push_normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut RngStream) -> usize {
        let t: Tensor<T> = rng.gaussian(shape);
        self.push(name, t.scale(T::of(std)))
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    /// Mutable data of two distinct tensors at once (`i < j`).
    pub fn pair_mut(&mut self, i: usize, j: usize) -> (&mut [T], &mut [T]) {
        assert!(i < j, "pair_mut needs i < j");
        let (lo, hi) = self.tensors.split_at_mut(j);
        (lo[i].data_mut(), hi[0].data_mut())
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `self += alpha * other`, matching tensors by position.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b);
        }
    }

    pub fn scale_inplace(&mut self, s: T) {
        for t in &mut self.tensors {
            t.map_inplace(|x| x * s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Flat view over every scalar, used by gradient checks.
    pub fn flat_get(&self, mut k: usize) -> T {
        for t in &self.tensors {
            if k < t.len() {
                return t.data()[k];
            }
            k -= t.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut k: usize, v: T) {
        for t in &mut self.tensors {
            if k < t.len() {
                t.data_mut()[k] = v;
                return;
            }
            k -= t.len();
        }
        panic!("flat index out of range")
    }

    /// Copies every tensor of `self` out of `source`, prefixed by `prefix`.
    pub fn load_from<'a>(
        &mut self,
        prefix: &str,
        source: impl Fn(&str) -> Option<&'a Tensor<T>>,
    ) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let key = format!("{prefix}{name}");
            let src = source(&key)
                .ok_or_else(|| Error::Contract(format!("missing tensor {key:?}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Contract(format!(
                    "tensor {key:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}
