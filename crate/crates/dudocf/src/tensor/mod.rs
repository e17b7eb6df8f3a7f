//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! `Tensor` is the standalone value type (parameters, datasets, labels).
//! `Graph` is a define-by-run tape: ops execute eagerly, record themselves in
//! topological order, and `backward` replays the record once in reverse. All
//! math is 64-bit; heavy kernels parallelize over disjoint output slices so
//! thread count never changes results.

mod graph;
mod kernels;

pub mod check;
pub mod linop;

pub use graph::{BnMode, Graph, NodeId};
pub use linop::LinearOp;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 in row-major order, with an optional
/// gradient buffer of identical shape (present iff `requires_grad`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "Tensor::from_vec",
                format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            ));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim("Tensor::from_vec", format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Scalar tensor (rank 0, one element).
    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value], requires_grad: false, grad: None }
    }

    /// Kaiming-style fan-in scaled normal init: std = sqrt(2 / fan_in).
    pub fn kaiming(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Enable gradient accumulation, allocating the grad buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        self
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self.grad.as_mut().expect("accumulate_grad on tensor without grad buffer");
        assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_mismatch_is_dim_error() {
        match Tensor::from_vec(vec![2, 3], vec![0.0; 5]) {
            Err(Error::Dim { .. }) => {}
            other => panic!("expected dim error, got {other:?}"),
        }
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let t = Tensor::zeros(vec![4]);
        assert!(!t.requires_grad() && t.grad().is_none());
        let t = t.with_grad();
        assert!(t.requires_grad() && t.grad().unwrap().len() == 4);
    }

    #[test]
    fn scalar_has_rank_zero_and_one_element() {
        let s = Tensor::scalar(2.5);
        assert!(s.shape().is_empty());
        assert_eq!(s.numel(), 1);
    }
}
