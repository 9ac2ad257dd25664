//! Quadratic softmax attention: R_i = sum_j softmax_j(Q_i . K_j) V_j, with
//! the causal variant masking j > i before normalization. No scaling factor
//! is applied to the scores; callers that want scaled scores bake the factor
//! into Q.

use super::heads::{attn_apply_v, merge_heads, scores_qk, split_heads};
use super::{check_heads, check_qkv};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite stand-in for -inf: large enough that exp underflows to exactly 0
/// after the softmax shift, small enough to keep every tensor finite.
pub(crate) const MASK_VALUE: f64 = -1e9;

/// Additive causal mask over per-head scores [h,n,m]: 0 where j <= i,
/// `MASK_VALUE` where j > i.
pub(crate) fn causal_score_mask(h: usize, n: usize, m: usize) -> Result<Tensor> {
    Tensor::from_fn(vec![h, n, m], |ix| if ix[2] > ix[1] { MASK_VALUE } else { 0.0 })
}

/// Single-head canonical attention over [n,d] / [m,d] / [m,d].
pub fn canonical_attention(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
    canonical_attention_heads(q, k, v, 1, causal)
}

/// Multi-head canonical attention; splits channels into `heads` independent
/// attention maps and merges the results.
pub fn canonical_attention_heads(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Result<Tensor> {
    let (n, m, d) = check_qkv("canonical_attention", q, k, v)?;
    check_heads("canonical_attention", d, heads)?;
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let vh = split_heads(v, heads)?;
    let mut scores = scores_qk(&qh, &kh)?;
    if causal {
        scores = scores.add(&causal_score_mask(heads, n, m)?)?;
    }
    let p = scores.softmax_axis(2)?;
    merge_heads(&attn_apply_v(&p, &vh)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::{max_rel_err, rel_err};

    fn seeded_qkv(seed: u64, n: usize, m: usize, d: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = seeded(seed);
        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -1.0, 1.0).unwrap();
        let k = Tensor::rand_uniform(&mut rng, vec![m, d], -1.0, 1.0).unwrap();
        let v = Tensor::rand_uniform(&mut rng, vec![m, d], -1.0, 1.0).unwrap();
        (q, k, v)
    }

    // Scalar double-loop reference: per query, two-pass softmax over raw
    // scores, then the weighted value sum.
    fn double_loop_oracle(q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Tensor {
        let (n, d) = (q.shape()[0], q.shape()[1]);
        let m = k.shape()[0];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let limit = if causal { i + 1 } else { m };
            let mut scores = Vec::with_capacity(limit);
            for j in 0..limit {
                let mut s = 0.0;
                for a in 0..d {
                    s += q.at(&[i, a]) * k.at(&[j, a]);
                }
                scores.push(s);
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let denom: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                for a in 0..d {
                    out[i * d + a] += (w / denom) * v.at(&[j, a]);
                }
            }
        }
        Tensor::from_vec(vec![n, d], out).unwrap()
    }

    #[test]
    fn matches_double_loop_oracle() {
        let (q, k, v) = seeded_qkv(21, 6, 6, 4);
        let got = canonical_attention(&q, &k, &v, false).unwrap();
        let want = double_loop_oracle(&q, &k, &v, false);
        assert!(max_rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn causal_matches_double_loop_oracle() {
        let (q, k, v) = seeded_qkv(22, 7, 7, 4);
        let got = canonical_attention(&q, &k, &v, true).unwrap();
        let want = double_loop_oracle(&q, &k, &v, true);
        assert!(max_rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let (q, k, v) = seeded_qkv(23, 5, 8, 6);
        let got = canonical_attention_heads(&q, &k, &v, 2, false).unwrap();
        // Run the oracle per head on channel slices.
        for hh in 0..2 {
            let slice = |t: &Tensor, rows: usize| {
                Tensor::from_fn(vec![rows, 3], |ix| t.at(&[ix[0], hh * 3 + ix[1]])).unwrap()
            };
            let want = double_loop_oracle(&slice(&q, 5), &slice(&k, 8), &slice(&v, 8), false);
            for i in 0..5 {
                for a in 0..3 {
                    assert!(rel_err(got.at(&[i, hh * 3 + a]), want.at(&[i, a])) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn causal_first_row_copies_first_value_row() {
        let (q, k, v) = seeded_qkv(24, 4, 4, 3);
        let out = canonical_attention(&q, &k, &v, true).unwrap();
        for a in 0..3 {
            assert!(rel_err(out.at(&[0, a]), v.at(&[0, a])) <= 1e-12, "row 0 sees only source 0");
        }
    }

    #[test]
    fn joint_source_permutation_leaves_output_unchanged() {
        let (q, k, v) = seeded_qkv(25, 4, 6, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let kp = Tensor::from_fn(vec![6, 4], |ix| k.at(&[perm[ix[0]], ix[1]])).unwrap();
        let vp = Tensor::from_fn(vec![6, 4], |ix| v.at(&[perm[ix[0]], ix[1]])).unwrap();
        let base = canonical_attention(&q, &k, &v, false).unwrap();
        let permuted = canonical_attention(&q, &kp, &vp, false).unwrap();
        assert!(max_rel_err(&base, &permuted) <= 1e-12);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let (q, k, v) = seeded_qkv(26, 4, 4, 6);
        let err = canonical_attention_heads(&q, &k, &v, 4, false).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('4'), "got: {msg}");
    }
}
