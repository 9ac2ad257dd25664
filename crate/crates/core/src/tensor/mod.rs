//! Dense row-major tensors of rank 1..=4 with the deterministic kernels the
//! rest of the crate is built from.
//!
//! Design constraints that matter for reproducibility:
//! - every reduction runs in a fixed left-to-right order, so results are
//!   bit-identical across runs and platforms;
//! - `F32` dtype means "32-bit semantics": kernels accumulate in f64 and round
//!   every stored output element to the nearest f32;
//! - all extents are >= 1; zero-sized axes are rejected with a dimension
//!   error rather than silently producing empty results;
//! - in debug builds every kernel asserts its output is finite.

mod ops;

pub(crate) use ops::*;

use crate::error::{FlowError, Result};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const MAX_RANK: usize = 4;

/// Numeric behavior of stored values. Storage is always f64; `F32` rounds
/// every kernel output element to f32 precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[serde(rename = "f64")]
    F64,
    #[serde(rename = "f32")]
    F32,
}

impl Dtype {
    /// Mixed-dtype ops stay in F32 only when every operand is F32.
    pub fn promote(self, other: Dtype) -> Dtype {
        if self == Dtype::F32 && other == Dtype::F32 { Dtype::F32 } else { Dtype::F64 }
    }
}

impl std::fmt::Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F64 => write!(f, "f64"),
            Dtype::F32 => write!(f, "f32"),
        }
    }
}

impl std::str::FromStr for Dtype {
    type Err = FlowError;
    fn from_str(s: &str) -> Result<Dtype> {
        match s {
            "f64" => Ok(Dtype::F64),
            "f32" => Ok(Dtype::F32),
            other => Err(FlowError::contract("dtype", format!("unknown dtype {other:?}, expected f64 or f32"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: Dtype,
}

pub(crate) fn check_shape(op: &'static str, shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(FlowError::dim(op, format!("rank must be 1..={MAX_RANK}, got shape {shape:?}")));
    }
    if let Some(_) = shape.iter().find(|&&e| e == 0) {
        return Err(FlowError::dim(op, format!("all extents must be >= 1, got shape {shape:?}")));
    }
    Ok(())
}

/// Round one value to 32-bit precision.
#[inline]
pub fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

impl Tensor {
    /// Build a tensor, validating rank, extents and element count.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, dtype: Dtype) -> Result<Tensor> {
        check_shape("tensor::new", &shape)?;
        let len: usize = shape.iter().product();
        if data.len() != len {
            return Err(FlowError::dim(
                "tensor::new",
                format!("shape {shape:?} implies {len} elements, got {}", data.len()),
            ));
        }
        let data = match dtype {
            Dtype::F64 => data,
            Dtype::F32 => data.into_iter().map(quantize_f32).collect(),
        };
        Ok(Tensor { shape, data, dtype })
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(shape, data, Dtype::F64)
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; len.max(1)], Dtype::F64)
    }

    pub fn ones(shape: Vec<usize>) -> Result<Tensor> {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        Tensor::new(shape, vec![value; len.max(1)], Dtype::F64)
    }

    /// Rank-1 scalar wrapper, shape [1].
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: vec![1], data: vec![value], dtype: Dtype::F64 }
    }

    /// Element (i0, i1, ...) = f(i0, i1, ...) over row-major order.
    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Tensor> {
        check_shape("tensor::from_fn", &shape)?;
        let len: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Tensor::new(shape, data, Dtype::F64)
    }

    /// Uniform draws in [lo, hi), row-major fill order.
    pub fn rand_uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Result<Tensor> {
        check_shape("tensor::rand_uniform", &shape)?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| crate::rng::uniform(rng, lo, hi)).collect();
        Tensor::new(shape, data, Dtype::F64)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents are always >= 1
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn to_dtype(&self, dtype: Dtype) -> Tensor {
        let data = match dtype {
            Dtype::F64 => self.data.clone(),
            Dtype::F32 => self.data.iter().map(|&v| quantize_f32(v)).collect(),
        };
        Tensor { shape: self.shape.clone(), data, dtype }
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (ax, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[ax]);
            off = off * self.shape[ax] + i;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    /// Scalar payload of a shape-[1] tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(FlowError::contract(
                "tensor::item",
                format!("expected a single element, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// Finalize a kernel output: apply dtype rounding and (debug) check
    /// every element is finite.
    pub(crate) fn finish(op: &'static str, shape: Vec<usize>, mut data: Vec<f64>, dtype: Dtype) -> Tensor {
        if dtype == Dtype::F32 {
            for v in data.iter_mut() {
                *v = quantize_f32(*v);
            }
        }
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "{op}: non-finite output element at index {:?}",
            data.iter().position(|v| !v.is_finite())
        );
        let _ = op;
        Tensor { shape, data, dtype }
    }
}

/// |a - b| / max(|a|, |b|, 1e-8); the relative-error convention used by every
/// tolerance in this crate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Largest elementwise [`rel_err`] between two same-shaped tensors.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_extent() {
        let err = Tensor::zeros(vec![3, 0]).unwrap_err();
        assert!(matches!(err, FlowError::Dim { .. }), "got {err}");
        assert!(err.to_string().contains("[3, 0]"));
    }

    #[test]
    fn rejects_rank_five() {
        let err = Tensor::zeros(vec![1, 1, 1, 1, 1]).unwrap_err();
        assert!(matches!(err, FlowError::Dim { .. }));
    }

    #[test]
    fn rejects_wrong_element_count() {
        let err = Tensor::from_vec(vec![2, 2], vec![1.0; 3]).unwrap_err();
        assert!(err.to_string().contains("implies 4 elements"));
    }

    #[test]
    fn f32_dtype_rounds_storage() {
        let t = Tensor::new(vec![1], vec![0.1], Dtype::F32).unwrap();
        assert_eq!(t.data()[0], 0.1f32 as f64);
        assert_ne!(t.data()[0], 0.1f64);
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor::from_fn(vec![2, 3], |ix| (ix[0] * 10 + ix[1]) as f64).unwrap();
        assert_eq!(t.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(t.at(&[1, 2]), 12.0);
    }

    #[test]
    fn rel_err_uses_floor_denominator() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-9 / 1e-8).abs() < 1e-12);
    }
}
