//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain shape + contiguous-data value type; [`Var`] wraps a
//! tensor into a dynamically built computation graph so that a scalar loss can
//! be differentiated with [`Var::backward`]. Gradients land in [`Param`]
//! leaves, which persist across training steps.
//!
//! Two numeric modes exist per run: a 64-bit verification mode used by the
//! gradient-checking suites, and a 32-bit training mode in which every op
//! output is quantized to `f32` precision (accumulation still happens in
//! double precision). The mode is thread-local; a training or evaluation run
//! owns one thread, matching the single-threaded computation-graph model.

mod gradcheck;
mod var;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use var::{Param, Var};

use std::cell::Cell;

use crate::error::{Error, Result};

/// Per-run floating point mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NumericMode {
    /// Full `f64` precision; required by the finite-difference suites.
    Verify64,
    /// Values are quantized to `f32` precision after every operation.
    Train32,
}

thread_local! {
    static MODE: Cell<NumericMode> = const { Cell::new(NumericMode::Verify64) };
}

/// Selects the numeric mode for the current thread (one run = one thread).
pub fn set_numeric_mode(mode: NumericMode) {
    MODE.with(|m| m.set(mode));
}

pub fn numeric_mode() -> NumericMode {
    MODE.with(|m| m.get())
}

/// Dense row-major tensor. Immutable once constructed; every forward
/// operation allocates its output.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, enforcing `product(shape) == data.len()` and that all
    /// entries are finite. In 32-bit mode the data is quantized to `f32`
    /// precision.
    pub fn new(shape: Vec<usize>, mut data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        match numeric_mode() {
            NumericMode::Verify64 => {
                if !data.iter().all(|v| v.is_finite()) {
                    return Err(Error::numeric("non-finite value in tensor"));
                }
            }
            NumericMode::Train32 => {
                for v in data.iter_mut() {
                    let q = *v as f32;
                    if !q.is_finite() {
                        return Err(Error::numeric("non-finite value in tensor"));
                    }
                    *v = q as f64;
                }
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for data known to be finite (zeros, ones, ...).
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![0.0; numel])
    }

    pub fn ones(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::from_raw(shape.to_vec(), vec![1.0; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_raw(vec![], vec![v])
    }

    /// 2-D identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor::from_raw(vec![n, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the storage; owned tensors only — graph nodes hold
    /// their values immutably.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Sole element of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Element of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub(crate) fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    /// Elementwise in-place accumulation; shapes must match.
    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_data_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        let err = Tensor::new(vec![1], vec![f64::INFINITY]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn train32_mode_quantizes_to_f32() {
        set_numeric_mode(NumericMode::Train32);
        let v = 0.1f64 + 1e-12;
        let t = Tensor::new(vec![1], vec![v]).unwrap();
        assert_eq!(t.data()[0], (v as f32) as f64);
        set_numeric_mode(NumericMode::Verify64);
        let t = Tensor::new(vec![1], vec![v]).unwrap();
        assert_eq!(t.data()[0], v);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
        assert!(Tensor::zeros(&[2]).item().is_err());
    }
}
