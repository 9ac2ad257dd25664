//! Head-split layout [seq, heads, per_head] and the contractions defined on
//! it. These are the only multi-head primitives any mechanism needs; all of
//! them sum in ascending index order.

use crate::error::Result;
use crate::tensor::Tensor;

/// [n, h*e] -> [n, h, e]. Row-major, so this is a pure reshape.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let n = x.shape()[0];
    let d = x.shape()[1];
    x.reshape(vec![n, heads, d / heads])
}

/// [n, h, e] -> [n, h*e]; exact inverse of `split_heads`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (n, h, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(vec![n, h * e])
}

/// Per-head score matrix: q [n,h,e], k [m,h,e] -> [h,n,m] with
/// out[h,i,j] = q_i . k_j (sum over e ascending).
pub fn scores_qk(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (n, h, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let m = k.shape()[0];
    let mut out = vec![0.0; h * n * m];
    for hh in 0..h {
        for i in 0..n {
            let qrow = &q.data()[(i * h + hh) * e..(i * h + hh + 1) * e];
            let obase = (hh * n + i) * m;
            for j in 0..m {
                let krow = &k.data()[(j * h + hh) * e..(j * h + hh + 1) * e];
                let mut acc = 0.0;
                for a in 0..e {
                    acc += qrow[a] * krow[a];
                }
                out[obase + j] = acc;
            }
        }
    }
    Ok(Tensor::finish("scores_qk", vec![h, n, m], out, q.dtype().promote(k.dtype())))
}

/// Weighted value mix: p [h,n,m], v [m,h,e] -> [n,h,e] with
/// out[i,h,:] = sum_j p[h,i,j] * v[j,h,:] (sum over j ascending).
pub fn attn_apply_v(p: &Tensor, v: &Tensor) -> Result<Tensor> {
    let (h, n, m) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let e = v.shape()[2];
    let mut out = vec![0.0; n * h * e];
    for hh in 0..h {
        for i in 0..n {
            let pbase = (hh * n + i) * m;
            let obase = (i * h + hh) * e;
            for j in 0..m {
                let w = p.data()[pbase + j];
                let vrow = &v.data()[(j * h + hh) * e..(j * h + hh + 1) * e];
                for a in 0..e {
                    out[obase + a] += w * vrow[a];
                }
            }
        }
    }
    Ok(Tensor::finish("attn_apply_v", vec![n, h, e], out, p.dtype().promote(v.dtype())))
}

/// Per-head source contraction: a [n,h,e], b [n,h,f] -> [h,e,f] with
/// out[h] = a[:,h,:]^T b[:,h,:] (sum over the sequence axis, ascending).
pub fn contract_seq(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, e) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let f = b.shape()[2];
    let mut out = vec![0.0; h * e * f];
    for hh in 0..h {
        let obase = hh * e * f;
        for j in 0..n {
            let arow = &a.data()[(j * h + hh) * e..(j * h + hh + 1) * e];
            let brow = &b.data()[(j * h + hh) * f..(j * h + hh + 1) * f];
            for (ai, &av) in arow.iter().enumerate() {
                let orow = &mut out[obase + ai * f..obase + (ai + 1) * f];
                for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                    *o += av * bv;
                }
            }
        }
    }
    Ok(Tensor::finish("contract_seq", vec![h, e, f], out, a.dtype().promote(b.dtype())))
}

/// Per-head context application: a [n,h,e], m [h,e,f] -> [n,h,f] with
/// out[i,h,:] = a[i,h,:] m[h] (sum over e ascending).
pub fn apply_per_head(a: &Tensor, mat: &Tensor) -> Result<Tensor> {
    let (n, h, e) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let f = mat.shape()[2];
    let mut out = vec![0.0; n * h * f];
    for i in 0..n {
        for hh in 0..h {
            let arow = &a.data()[(i * h + hh) * e..(i * h + hh + 1) * e];
            let obase = (i * h + hh) * f;
            for (ai, &av) in arow.iter().enumerate() {
                let mrow = &mat.data()[(hh * e + ai) * f..(hh * e + ai + 1) * f];
                for b in 0..f {
                    out[obase + b] += av * mrow[b];
                }
            }
        }
    }
    Ok(Tensor::finish("apply_per_head", vec![n, h, f], out, a.dtype().promote(mat.dtype())))
}
