//! Kernelized linear attention baseline:
//!
//!   R_i = phi(Q_i) (sum_j phi(K_j)^T V_j) / (phi(Q_i) . sum_j phi(K_j))
//!
//! with phi = elu + 1. Contracting K against V first is what makes this
//! O(n d^2) instead of O(n^2 d); the numerator is mathematically identical to
//! the dense form, only the association order differs.

use super::heads::{apply_per_head, contract_seq, merge_heads, split_heads};
use super::{check_heads, check_qkv, DEFAULT_EPS};
use crate::error::Result;
use crate::tensor::Tensor;

/// Single-head baseline over [n,d] / [m,d] / [m,d].
pub fn linear_attention_baseline(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    linear_attention_baseline_heads(q, k, v, 1)
}

/// Multi-head baseline; each head runs the kernelized form independently.
pub fn linear_attention_baseline_heads(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, _m, d) = check_qkv("linear_attention_baseline", q, k, v)?;
    check_heads("linear_attention_baseline", d, heads)?;
    let qf = split_heads(q, heads)?.elu_plus_one();
    let kf = split_heads(k, heads)?.elu_plus_one();
    let vh = split_heads(v, heads)?;
    let ctx = contract_seq(&kf, &vh)?; // [h,e,e] = sum_j phi(K_j)^T V_j
    let num = apply_per_head(&qf, &ctx)?;
    let ksum = kf.sum_axis(0)?; // [h,e]
    let den = qf.mul(&ksum.broadcast_axis(0, n)?)?.sum_axis(2)?; // [n,h]
    merge_heads(&num.stable_div(&den, DEFAULT_EPS)?)
}
