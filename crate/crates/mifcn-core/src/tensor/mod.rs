//! Dense row-major `f64` tensors and the elementwise operations the network
//! is built from.
//!
//! Shapes are explicit `Vec<usize>` dimension lists; an empty list is not a
//! valid shape (scalars are `[1]`). Binary operations require exactly equal
//! shapes, there is no broadcasting anywhere in this crate.

mod conv;
mod graph;

pub use conv::{conv2d_dilated, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_kernels, ConvSpec};
pub use graph::{Graph, NodeId};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    /// Scalar tensor of shape `[1]`.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != data.len() {
            return Err(Error::Shape(format!(
                "cannot build tensor of shape {shape:?} from {} elements",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a `[1]` tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element access for 2-D tensors, row major.
    pub fn at2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn set2(&mut self, row: usize, col: usize, value: f64) {
        debug_assert_eq!(self.shape.len(), 2);
        let cols = self.shape[1];
        self.data[row * cols + col] = value;
    }

    /// Same data viewed under a new shape with identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() || expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "{op}: shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    fn zip_map(&self, other: &Tensor, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    /// In-place accumulation, used on gradient buffers.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "hadamard", |a, b| a * b)
    }

    /// Elementwise division; any zero in the divisor is an error.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_shape(other, "div")?;
        if other.data.iter().any(|&b| b == 0.0) {
            return Err(Error::Domain("div: divisor contains zero".into()));
        }
        self.zip_map(other, "div", |a, b| a / b)
    }

    pub fn square(&self) -> Tensor {
        self.map(|v| v * v)
    }

    pub fn exp(&self) -> Tensor {
        self.map(f64::exp)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| k * v)
    }

    /// Leaky rectifier: identity for positive values, slope `alpha` otherwise.
    pub fn lrelu(&self, alpha: f64) -> Tensor {
        debug_assert!((0.0..1.0).contains(&alpha));
        self.map(|v| if v > 0.0 { v } else { alpha * v })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Arithmetic mean over all elements; empty tensors are rejected.
    pub fn reduce_mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::Domain("reduce_mean of empty tensor".into()));
        }
        Ok(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }
}

/// Central-difference gradient of a scalar function, one probe per element.
///
/// `step` must be positive. The result has the shape of `x` and approximates
/// `df/dx` to O(step^2) away from kinks of `f`.
pub fn finite_difference_grad(
    mut f: impl FnMut(&Tensor) -> f64,
    x: &Tensor,
    step: f64,
) -> Tensor {
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = f(&probe);
        probe.data[i] = orig - step;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::from_vec(&[rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn construction_and_access() {
        let t = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.at2(1, 2), 6.0);
        assert_eq!(Tensor::scalar(7.5).scalar_value().unwrap(), 7.5);
    }

    #[test]
    fn from_vec_rejects_size_mismatch() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[], vec![]).is_err());
    }

    #[test]
    fn elementwise_ops_match_hand_values() {
        let a = t2(1, 3, &[1.0, -2.0, 3.0]);
        let b = t2(1, 3, &[4.0, 5.0, -6.0]);
        assert_eq!(a.add(&b).unwrap().data(), &[5.0, 3.0, -3.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-3.0, -7.0, 9.0]);
        assert_eq!(a.hadamard(&b).unwrap().data(), &[4.0, -10.0, -18.0]);
        assert_eq!(a.div(&b).unwrap().data(), &[0.25, -0.4, -0.5]);
        assert_eq!(a.square().data(), &[1.0, 4.0, 9.0]);
        assert_eq!(a.scale(-2.0).data(), &[-2.0, 4.0, -6.0]);
    }

    #[test]
    fn div_by_zero_is_domain_error() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(1, 2, &[1.0, 0.0]);
        match a.div(&b) {
            Err(Error::Domain(_)) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[1.0, 2.0]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn exp_of_zero_and_one() {
        let t = t2(1, 2, &[0.0, 1.0]);
        let e = t.exp();
        assert_eq!(e.data()[0], 1.0);
        assert!((e.data()[1] - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn lrelu_leaks_negatives_and_keeps_positives() {
        let t = t2(1, 4, &[-2.0, -0.5, 0.0, 3.0]);
        let out = t.lrelu(0.2);
        assert_eq!(out.data(), &[-0.4, -0.1, 0.0, 3.0]);
    }

    #[test]
    fn reduce_mean_basics() {
        let t = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.reduce_mean().unwrap(), 2.5);
        let empty = Tensor::from_vec(&[0, 3], vec![]).unwrap();
        assert!(empty.reduce_mean().is_err());
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn finite_difference_on_quadratic() {
        // f(x) = sum(x^2) has gradient 2x; central differences are exact
        // for quadratics up to rounding.
        let x = t2(1, 3, &[1.0, -2.0, 0.5]);
        let g = finite_difference_grad(|t| t.data().iter().map(|v| v * v).sum(), &x, 1e-5);
        let expected = x.scale(2.0);
        assert!(g.max_abs_diff(&expected).unwrap() < 1e-9);
    }
}
