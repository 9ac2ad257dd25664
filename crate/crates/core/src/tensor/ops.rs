//! Kernels. Reductions run left-to-right; every output passes through
//! [`Tensor::finish`] for dtype rounding and the debug finite check.
//!
//! Broadcasting is deliberately narrow: `mul` and `stable_div` accept a
//! right-hand side whose shape is a leading prefix of the left's (each rhs
//! element then scales one contiguous block), and `broadcast_axis` inserts one
//! replicated axis. Nothing else broadcasts.

use super::{check_shape, Tensor};
use crate::error::{FlowError, Result};

/// (outer, len, inner) decomposition of `shape` around `axis`: element
/// (o, t, i) lives at flat offset (o * len + t) * inner + i.
pub(crate) fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(FlowError::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

/// Block size for prefix broadcasting: rhs shape must equal lhs shape or a
/// leading prefix of it. Returns the number of lhs elements each rhs element
/// covers (1 when shapes are equal).
fn prefix_block(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() <= lhs.len() && lhs[..rhs.len()] == *rhs {
        Ok(lhs[rhs.len()..].iter().product())
    } else {
        Err(FlowError::dim(
            op,
            format!("shape {rhs:?} is neither equal to nor a leading prefix of {lhs:?}"),
        ))
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn elu_plus_one_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

impl Tensor {
    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&v| f(v)).collect();
        Tensor::finish(op, self.shape().to_vec(), data, self.dtype())
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(FlowError::dim(op, format!("shape mismatch {:?} vs {:?}", self.shape(), other.shape())));
        }
        let data = self.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor::finish(op, self.shape().to_vec(), data, self.dtype().promote(other.dtype())))
    }

    /// Elementwise zip where `other` may be a leading-prefix shape of `self`.
    fn zip_prefix(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let block = prefix_block(op, self.shape(), other.shape())?;
        if block == 1 && self.shape() == other.shape() {
            return self.zip(other, op, f);
        }
        let mut data = Vec::with_capacity(self.len());
        for (i, &a) in self.data().iter().enumerate() {
            data.push(f(a, other.data()[i / block]));
        }
        Ok(Tensor::finish(op, self.shape().to_vec(), data, self.dtype().promote(other.dtype())))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    /// Elementwise product; `other` may be a leading-prefix shape, in which
    /// case each of its elements scales one contiguous block of `self`.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_prefix(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map("scale", |v| v * factor)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.map("add_scalar", |v| v + c)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.map("sigmoid", sigmoid_scalar)
    }

    pub fn exp(&self) -> Tensor {
        self.map("exp", f64::exp)
    }

    pub fn relu(&self) -> Tensor {
        self.map("relu", |v| v.max(0.0))
    }

    /// elu(x) + 1: x + 1 for x >= 0, exp(x) below. Strictly positive.
    pub fn elu_plus_one(&self) -> Tensor {
        self.map("elu_plus_one", elu_plus_one_scalar)
    }

    /// 2-D product [n,k] x [k,m] -> [n,m]. The k-sum for every output element
    /// accumulates in ascending k, so results are bit-stable.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 {
            return Err(FlowError::dim(
                "matmul",
                format!("expected two rank-2 tensors, got {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, k) = (self.shape()[0], self.shape()[1]);
        let (k2, m) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(FlowError::dim(
                "matmul",
                format!("inner extents differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data()[i * k..(i + 1) * k];
            let orow = &mut out[i * m..(i + 1) * m];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &other.data()[kk * m..(kk + 1) * m];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        Ok(Tensor::finish("matmul", vec![n, m], out, self.dtype().promote(other.dtype())))
    }

    /// Swap the last two axes (rank >= 2).
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(FlowError::dim("transpose_last2", format!("need rank >= 2, got shape {:?}", self.shape())));
        }
        let (p, q) = (self.shape()[r - 2], self.shape()[r - 1]);
        let outer: usize = self.shape()[..r - 2].iter().product();
        let mut out = vec![0.0; self.len()];
        for o in 0..outer {
            let base = o * p * q;
            for i in 0..p {
                for j in 0..q {
                    out[base + j * p + i] = self.data()[base + i * q + j];
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.swap(r - 2, r - 1);
        Ok(Tensor::finish("transpose_last2", shape, out, self.dtype()))
    }

    /// Reinterpret the same row-major data under a new shape.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        check_shape("reshape", &shape)?;
        let len: usize = shape.iter().product();
        if len != self.len() {
            return Err(FlowError::dim(
                "reshape",
                format!("cannot reshape {:?} ({} elements) to {:?} ({len} elements)", self.shape(), self.len(), shape),
            ));
        }
        Ok(Tensor::finish("reshape", shape, self.data().to_vec(), self.dtype()))
    }

    /// Sum out one axis. Rank drops by one; summing the only axis of a rank-1
    /// tensor yields shape [1].
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("sum_axis", self.shape(), axis)?;
        let (outer, len, inner) = lanes(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let src = (o * len + t) * inner;
                let dst = o * inner;
                for i in 0..inner {
                    out[dst + i] += self.data()[src + i];
                }
            }
        }
        let mut shape: Vec<usize> = self.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(Tensor::finish("sum_axis", shape, out, self.dtype()))
    }

    /// Insert a replicated axis of extent `len` at position `axis`.
    pub fn broadcast_axis(&self, axis: usize, len: usize) -> Result<Tensor> {
        if axis > self.rank() {
            return Err(FlowError::dim(
                "broadcast_axis",
                format!("axis {axis} out of range for insertion into shape {:?}", self.shape()),
            ));
        }
        let mut shape = self.shape().to_vec();
        shape.insert(axis, len);
        check_shape("broadcast_axis", &shape)?;
        let inner: usize = self.shape()[axis..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let mut out = Vec::with_capacity(self.len() * len);
        for o in 0..outer {
            let block = &self.data()[o * inner..(o + 1) * inner];
            for _ in 0..len {
                out.extend_from_slice(block);
            }
        }
        Ok(Tensor::finish("broadcast_axis", shape, out, self.dtype()))
    }

    /// Broadcast/reduce to an explicit target shape that this tensor's shape
    /// is a leading prefix of (inverse of prefix multiplication).
    pub fn sum_trailing_to(&self, shape: &[usize]) -> Result<Tensor> {
        let block = prefix_block("sum_trailing_to", self.shape(), shape)?;
        let mut out = vec![0.0; self.len() / block];
        for (i, &v) in self.data().iter().enumerate() {
            out[i / block] += v;
        }
        Ok(Tensor::finish("sum_trailing_to", shape.to_vec(), out, self.dtype()))
    }

    /// Full reduction, left-to-right over flat storage.
    pub fn sum_all(&self) -> f64 {
        let mut acc = 0.0;
        for &v in self.data() {
            acc += v;
        }
        acc
    }

    /// Shift-stable softmax along `axis`: each lane is shifted by its max
    /// before exponentiation, so the denominator is always >= 1.
    pub fn softmax_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax_axis", self.shape(), axis)?;
        let (outer, len, inner) = lanes(self.shape(), axis);
        let mut out = vec![0.0; self.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * len + t) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for t in 0..len {
                    mx = mx.max(self.data()[at(t)]);
                }
                let mut denom = 0.0;
                for t in 0..len {
                    let e = (self.data()[at(t)] - mx).exp();
                    out[at(t)] = e;
                    denom += e;
                }
                for t in 0..len {
                    out[at(t)] /= denom;
                }
            }
        }
        Ok(Tensor::finish("softmax_axis", self.shape().to_vec(), out, self.dtype()))
    }

    /// Inclusive prefix sums along `axis`.
    pub fn cumsum_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("cumsum_axis", self.shape(), axis)?;
        let (outer, len, inner) = lanes(self.shape(), axis);
        let mut out = vec![0.0; self.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = 0.0;
                for t in 0..len {
                    let off = (o * len + t) * inner + i;
                    acc += self.data()[off];
                    out[off] = acc;
                }
            }
        }
        Ok(Tensor::finish("cumsum_axis", self.shape().to_vec(), out, self.dtype()))
    }

    /// num / (den + eps), with `den` equal-shaped or a leading prefix of
    /// `num`. Denominator entries must be non-negative: they are flow
    /// capacities, and a negative one means an upstream bug, not something to
    /// smooth over.
    pub fn stable_div(&self, den: &Tensor, eps: f64) -> Result<Tensor> {
        if eps < 0.0 || !eps.is_finite() {
            return Err(FlowError::contract("stable_div", format!("eps must be finite and >= 0, got {eps}")));
        }
        if let Some(pos) = den.data().iter().position(|&v| v < 0.0) {
            return Err(FlowError::domain(
                "stable_div",
                format!("negative denominator entry {} at flat index {pos}", den.data()[pos]),
            ));
        }
        self.zip_prefix(den, "stable_div", |a, b| a / (b + eps))
    }

    /// Normalize the last axis to zero mean and unit variance (biased, 1/d),
    /// then apply elementwise gain and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(FlowError::dim(
                "layer_norm",
                format!(
                    "gamma {:?} and beta {:?} must both have shape [{d}] to match input {:?}",
                    gamma.shape(),
                    beta.shape(),
                    self.shape()
                ),
            ));
        }
        let rows = self.len() / d;
        let mut out = vec![0.0; self.len()];
        for r in 0..rows {
            let x = &self.data()[r * d..(r + 1) * d];
            let mean = x.iter().sum::<f64>() / d as f64;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = gamma.data()[j] * (x[j] - mean) * inv + beta.data()[j];
            }
        }
        let dtype = self.dtype().promote(gamma.dtype()).promote(beta.dtype());
        Ok(Tensor::finish("layer_norm", self.shape().to_vec(), out, dtype))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{max_rel_err, rel_err, Dtype};
    use proptest::prelude::*;

    fn seeded_tensor(seed: u64, shape: Vec<usize>) -> Tensor {
        Tensor::rand_uniform(&mut seeded(seed), shape, -1.0, 1.0).unwrap()
    }

    // Independent triple-loop product, k innermost.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let m = b.shape()[1];
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for t in 0..k {
                    acc += a.at(&[i, t]) * b.at(&[t, j]);
                }
                out[i * m + j] = acc;
            }
        }
        Tensor::from_vec(vec![n, m], out).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_exactly() {
        let a = seeded_tensor(11, vec![4, 3]);
        let b = seeded_tensor(12, vec![3, 2]);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert_eq!(got.data(), want.data(), "summation order must match the k-ascending oracle bit for bit");
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]).unwrap();
        let b = Tensor::zeros(vec![4, 5]).unwrap();
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "got: {msg}");
    }

    #[test]
    fn matmul_association_error_is_small() {
        let a = seeded_tensor(1, vec![16, 16]);
        let b = seeded_tensor(2, vec![16, 16]);
        let c = seeded_tensor(3, vec![16, 16]);
        let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
        let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
        let err = max_rel_err(&left, &right);
        assert!(err <= 1e-8, "associativity drift {err}");
    }

    #[test]
    fn softmax_of_constant_lane_is_uniform() {
        let x = Tensor::zeros(vec![4]).unwrap();
        let s = x.softmax_axis(0).unwrap();
        for &v in s.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn softmax_middle_axis_lanes_are_independent() {
        let x = seeded_tensor(5, vec![2, 3, 2]);
        let s = x.softmax_axis(1).unwrap();
        for o in 0..2 {
            for i in 0..2 {
                let lane: f64 = (0..3).map(|t| s.at(&[o, t, i])).sum();
                assert!((lane - 1.0).abs() <= 1e-12, "lane sum {lane}");
            }
        }
    }

    #[test]
    fn cumsum_basic() {
        let x = Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(x.cumsum_axis(0).unwrap().data(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn cumsum_axis0_of_rank3_runs_down_columns() {
        let x = seeded_tensor(6, vec![4, 2, 3]);
        let c = x.cumsum_axis(0).unwrap();
        for h in 0..2 {
            for e in 0..3 {
                let mut acc = 0.0;
                for t in 0..4 {
                    acc += x.at(&[t, h, e]);
                    assert_eq!(c.at(&[t, h, e]), acc);
                }
            }
        }
    }

    #[test]
    fn stable_div_zero_denominator_uses_eps_exactly() {
        let num = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let den = Tensor::zeros(vec![1]).unwrap();
        let out = num.stable_div(&den, 1e-6).unwrap();
        assert_eq!(out.data()[0], 1.0 / 1e-6);
    }

    #[test]
    fn stable_div_rejects_negative_denominator() {
        let num = Tensor::ones(vec![3]).unwrap();
        let den = Tensor::from_vec(vec![3], vec![1.0, -0.5, 2.0]).unwrap();
        let err = num.stable_div(&den, 1e-6).unwrap_err();
        assert!(matches!(err, FlowError::Domain { .. }));
        assert!(err.to_string().contains("index 1"), "got: {err}");
    }

    #[test]
    fn stable_div_broadcasts_prefix_denominator() {
        let num = Tensor::from_fn(vec![2, 2, 2], |ix| (ix[0] * 4 + ix[1] * 2 + ix[2]) as f64).unwrap();
        let den = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let out = num.stable_div(&den, 0.0).unwrap();
        assert_eq!(out.at(&[1, 1, 0]), 6.0 / 8.0);
        assert_eq!(out.at(&[0, 1, 1]), 3.0 / 2.0);
    }

    #[test]
    fn layer_norm_constant_row_returns_beta() {
        let x = Tensor::full(vec![2, 4], 3.5).unwrap();
        let gamma = Tensor::ones(vec![4]).unwrap();
        let beta = Tensor::from_vec(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = x.layer_norm(&gamma, &beta, 1e-5).unwrap();
        for r in 0..2 {
            for j in 0..4 {
                assert!((out.at(&[r, j]) - beta.data()[j]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_matches_scalar_oracle() {
        let x = seeded_tensor(7, vec![3, 5]);
        let gamma = seeded_tensor(8, vec![5]);
        let beta = seeded_tensor(9, vec![5]);
        let eps = 1e-5;
        let out = x.layer_norm(&gamma, &beta, eps).unwrap();
        for r in 0..3 {
            let row: Vec<f64> = (0..5).map(|j| x.at(&[r, j])).collect();
            let mean: f64 = row.iter().sum::<f64>() / 5.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
            for j in 0..5 {
                let want = gamma.data()[j] * (row[j] - mean) / (var + eps).sqrt() + beta.data()[j];
                assert!(rel_err(out.at(&[r, j]), want) <= 1e-14);
            }
        }
    }

    #[test]
    fn transpose_last2_is_an_involution() {
        let x = seeded_tensor(10, vec![2, 3, 4]);
        let back = x.transpose_last2().unwrap().transpose_last2().unwrap();
        assert_eq!(x.data(), back.data());
        assert_eq!(x.transpose_last2().unwrap().shape(), &[2, 4, 3]);
    }

    #[test]
    fn broadcast_then_sum_axis_roundtrips_scaled() {
        let x = seeded_tensor(13, vec![3, 2]);
        let b = x.broadcast_axis(0, 5).unwrap();
        assert_eq!(b.shape(), &[5, 3, 2]);
        let s = b.sum_axis(0).unwrap();
        let want = x.scale(5.0);
        assert!(max_rel_err(&s, &want) <= 1e-12);
    }

    #[test]
    fn sum_trailing_to_inverts_prefix_mul_shape() {
        let x = Tensor::from_fn(vec![2, 3, 2], |ix| (ix[2] + 1) as f64).unwrap();
        let s = x.sum_trailing_to(&[2, 3]).unwrap();
        assert_eq!(s.shape(), &[2, 3]);
        for &v in s.data() {
            assert_eq!(v, 3.0);
        }
    }

    #[test]
    fn f32_results_are_quantized() {
        let a = Tensor::new(vec![1], vec![0.1], Dtype::F32).unwrap();
        let b = Tensor::new(vec![1], vec![0.2], Dtype::F32).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.dtype(), Dtype::F32);
        assert_eq!(c.data()[0], (0.1f32 as f64 + 0.2f32 as f64) as f32 as f64);
    }

    #[test]
    fn elu_plus_one_is_continuous_and_positive() {
        let x = Tensor::from_vec(vec![5], vec![-30.0, -1.0, 0.0, 1.0, 3.0]).unwrap();
        let y = x.elu_plus_one();
        assert!(y.data().iter().all(|&v| v > 0.0));
        assert_eq!(y.data()[2], 1.0);
        assert_eq!(y.data()[3], 2.0);
        assert!((y.data()[1] - (-1.0f64).exp()).abs() <= 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_lanes_sum_to_one(vals in proptest::collection::vec(-50.0f64..50.0, 2..24)) {
            let n = vals.len();
            let x = Tensor::from_vec(vec![n], vals).unwrap();
            let s = x.softmax_axis(0).unwrap();
            let total: f64 = s.data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        }

        #[test]
        fn softmax_is_shift_invariant(vals in proptest::collection::vec(-20.0f64..20.0, 2..16), c in -100.0f64..100.0) {
            let n = vals.len();
            let x = Tensor::from_vec(vec![n], vals).unwrap();
            let shifted = x.add_scalar(c);
            let a = x.softmax_axis(0).unwrap();
            let b = shifted.softmax_axis(0).unwrap();
            prop_assert!(max_rel_err(&a, &b) <= 1e-12);
        }

        #[test]
        fn cumsum_adjoint_identity_on_reversals(vals in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            // cumsum(x)[last] == sum(x): the invariant the reverse-mode rule leans on.
            let n = vals.len();
            let x = Tensor::from_vec(vec![n], vals).unwrap();
            let c = x.cumsum_axis(0).unwrap();
            prop_assert!(rel_err(c.data()[n - 1], x.sum_all()) <= 1e-12);
        }
    }
}
