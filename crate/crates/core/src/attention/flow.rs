//! Attention as conserved flow on the bipartite source/sink graph.
//!
//! With non-negative features Qf = phi(Q), Kf = phi(K), define per head
//!
//!   incoming  I_i = Qf_i . sum_j Kf_j          (sink capacity)
//!   outgoing  O_j = Kf_j . sum_i Qf_i          (source capacity)
//!
//! Normalizing the opposite side by these capacities conserves flow: each
//! source normalized by O contributes exactly 1 to the sinks it feeds, and
//! symmetrically for sinks. The conserved quantities
//!
//!   I-hat_i = Qf_i . sum_j (Kf_j / O_j)
//!   O-hat_j = Kf_j . sum_i (Qf_i / I_i)
//!
//! then drive competition among sources (softmax over O-hat weights V) and
//! allocation at sinks (sigmoid over I-hat gates the output). Everything is
//! built from sums over one axis, so cost stays linear in sequence length.
//!
//! The causal variant replaces full-sequence sums with prefix sums and
//! divides each by its position index (1-based), exactly mirroring the
//! non-causal quantities on every prefix.

use super::heads::{apply_per_head, contract_seq, merge_heads, split_heads};
use super::{check_heads, check_qkv, AllocationAct, AttentionConfig, CompetitionAct, FlowStats};
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Raw and conserved capacities for already-mapped features qf [n,h,e],
/// kf [m,h,e]. Entries must be non-negative; capacities make no sense
/// otherwise.
pub fn flow_quantities_normal(qf: &Tensor, kf: &Tensor, eps: f64) -> Result<FlowStats> {
    let (stats, _, _) = quantities_with_ratios(qf, kf, eps)?;
    Ok(stats)
}

/// Shared implementation that also returns the normalized features
/// (Qf / I, Kf / O) so callers do not recompute them.
fn quantities_with_ratios(qf: &Tensor, kf: &Tensor, eps: f64) -> Result<(FlowStats, Tensor, Tensor)> {
    for (name, t) in [("Qf", qf), ("Kf", kf)] {
        if t.rank() != 3 {
            return Err(FlowError::dim(
                "flow_quantities",
                format!("{name} must be [seq, heads, per_head], got {:?}", t.shape()),
            ));
        }
        if let Some(pos) = t.data().iter().position(|&x| x < 0.0) {
            return Err(FlowError::domain(
                "flow_quantities",
                format!("negative {name} entry {} at flat index {pos}; features must be non-negative", t.data()[pos]),
            ));
        }
    }
    if qf.shape()[1..] != kf.shape()[1..] {
        return Err(FlowError::dim(
            "flow_quantities",
            format!("head layout mismatch: Qf {:?} vs Kf {:?}", qf.shape(), kf.shape()),
        ));
    }
    let n = qf.shape()[0];
    let m = kf.shape()[0];

    let ksum = kf.sum_axis(0)?; // [h,e]
    let incoming = qf.mul(&ksum.broadcast_axis(0, n)?)?.sum_axis(2)?; // I [n,h]
    let qsum = qf.sum_axis(0)?;
    let outgoing = kf.mul(&qsum.broadcast_axis(0, m)?)?.sum_axis(2)?; // O [m,h]

    let k_over_o = kf.stable_div(&outgoing, eps)?; // [m,h,e]
    let conserved_incoming = qf.mul(&k_over_o.sum_axis(0)?.broadcast_axis(0, n)?)?.sum_axis(2)?;
    let q_over_i = qf.stable_div(&incoming, eps)?; // [n,h,e]
    let conserved_outgoing = kf.mul(&q_over_i.sum_axis(0)?.broadcast_axis(0, m)?)?.sum_axis(2)?;

    let stats = FlowStats { incoming, outgoing, conserved_incoming, conserved_outgoing };
    Ok((stats, q_over_i, k_over_o))
}

/// Non-causal flow attention over [n,d] / [m,d] / [m,d]. Returns the merged
/// output and the per-head flow statistics that produced it.
pub fn flow_attention_normal(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<(Tensor, FlowStats)> {
    let (_n, _m, d) = check_qkv("flow_attention_normal", q, k, v)?;
    check_heads("flow_attention_normal", d, cfg.heads)?;
    let qf = cfg.phi.apply(&split_heads(q, cfg.heads)?);
    let kf = cfg.phi.apply(&split_heads(k, cfg.heads)?);
    let vh = split_heads(v, cfg.heads)?;

    let (stats, q_over_i, _) = quantities_with_ratios(&qf, &kf, cfg.eps)?;

    let v_hat = if cfg.competition_enabled {
        let comp = match cfg.competition_act {
            CompetitionAct::Softmax => stats.conserved_outgoing.softmax_axis(0)?,
            CompetitionAct::Sigmoid => stats.conserved_outgoing.sigmoid(),
        };
        vh.mul(&comp)?
    } else {
        vh
    };

    let ctx = contract_seq(&kf, &v_hat)?; // [h,e,e]
    let agg = apply_per_head(&q_over_i, &ctx)?;

    let r = if cfg.allocation_enabled {
        let gate = match cfg.allocation_act {
            AllocationAct::Sigmoid => stats.conserved_incoming.sigmoid(),
            AllocationAct::Softmax => stats.conserved_incoming.softmax_axis(0)?,
        };
        agg.mul(&gate)?
    } else {
        agg
    };

    let out = merge_heads(&r)?;
    ensure_finite("flow_attention_normal", &out, cfg.heads)?;
    Ok((out, stats))
}

/// Causal flow attention over equal-length Q, K, V. Output row t depends
/// only on rows <= t, bit-exactly: every internal reduction is a prefix scan.
pub fn flow_attention_causal(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<(Tensor, FlowStats)> {
    let (n, m, d) = check_qkv("flow_attention_causal", q, k, v)?;
    if n != m {
        return Err(FlowError::dim(
            "flow_attention_causal",
            format!("causal attention needs equal lengths, got Q rows {n} and K rows {m}"),
        ));
    }
    check_heads("flow_attention_causal", d, cfg.heads)?;
    let qf = cfg.phi.apply(&split_heads(q, cfg.heads)?);
    let kf = cfg.phi.apply(&split_heads(k, cfg.heads)?);
    let vh = split_heads(v, cfg.heads)?;
    if let Some(pos) = qf.data().iter().chain(kf.data().iter()).position(|&x| x < 0.0) {
        return Err(FlowError::domain(
            "flow_attention_causal",
            format!("negative feature entry at flat index {pos}; phi must be non-negative"),
        ));
    }

    let (stats, positions) = causal_quantities(&qf, &kf, cfg.eps)?;

    let v_hat = if cfg.competition_enabled {
        let comp = match cfg.competition_act {
            CompetitionAct::Softmax => causal_competition(&stats.conserved_outgoing)?,
            // Ablation path: a per-source gate needs no prefix normalization,
            // so no position rescale either.
            CompetitionAct::Sigmoid => stats.conserved_outgoing.sigmoid(),
        };
        vh.mul(&comp)?
    } else {
        vh
    };

    let i_times_d = stats.incoming.mul(&positions)?;
    let q_norm = qf.stable_div(&i_times_d, cfg.eps)?;
    let cdp = causal_dot_product(&q_norm, &kf, &v_hat)?;

    let r = if cfg.allocation_enabled {
        let gate = match cfg.allocation_act {
            AllocationAct::Sigmoid => stats.conserved_incoming.sigmoid(),
            // Ablation path: mirror the competition treatment of the causal
            // softmax, position rescale included.
            AllocationAct::Softmax => causal_competition(&stats.conserved_incoming)?,
        };
        cdp.mul(&gate)?
    } else {
        cdp
    };

    let out = merge_heads(&r)?;
    ensure_finite("flow_attention_causal", &out, cfg.heads)?;
    Ok((out, stats))
}

/// Per-prefix capacities for already-mapped causal features [n,h,e]. The
/// same definitions as [`flow_quantities_normal`] evaluated on every prefix,
/// which is what dividing each prefix sum by its 1-based length does. Also
/// returns the [n,h] position tensor since callers keep needing it.
fn causal_quantities(qf: &Tensor, kf: &Tensor, eps: f64) -> Result<(FlowStats, Tensor)> {
    let (n, h) = (qf.shape()[0], qf.shape()[1]);
    // 1-based positions; dividing each prefix sum by its length keeps every
    // quantity the exact per-prefix mean it is in the non-causal version.
    let positions = Tensor::from_fn(vec![n, h], |ix| (ix[0] + 1) as f64)?;

    let incoming = qf.mul(&kf.cumsum_axis(0)?)?.sum_axis(2)?.stable_div(&positions, 0.0)?;
    let outgoing = kf.mul(&qf.cumsum_axis(0)?)?.sum_axis(2)?.stable_div(&positions, 0.0)?;
    let k_over_o = kf.stable_div(&outgoing, eps)?;
    let conserved_incoming = qf.mul(&k_over_o.cumsum_axis(0)?)?.sum_axis(2)?.stable_div(&positions, 0.0)?;
    let q_over_i = qf.stable_div(&incoming, eps)?;
    let conserved_outgoing = kf.mul(&q_over_i.cumsum_axis(0)?)?.sum_axis(2)?.stable_div(&positions, 0.0)?;

    let stats = FlowStats { incoming, outgoing, conserved_incoming, conserved_outgoing };
    Ok((stats, positions))
}

/// Flow statistics for raw (unmapped) Q, K under `cfg`. For callers that run
/// a non-kernel path, the dense oracle, but still want the flow reading of
/// its inputs; the numbers match what the kernel paths report.
pub(crate) fn raw_flow_stats(q: &Tensor, k: &Tensor, cfg: &AttentionConfig, causal: bool) -> Result<FlowStats> {
    let qf = cfg.phi.apply(&split_heads(q, cfg.heads)?);
    let kf = cfg.phi.apply(&split_heads(k, cfg.heads)?);
    if causal {
        causal_quantities(&qf, &kf, cfg.eps).map(|(stats, _)| stats)
    } else {
        flow_quantities_normal(&qf, &kf, cfg.eps)
    }
}

/// Prefix-normalized softmax scaled by position:
///
///   comp_t = D_t * exp(x_t) / sum_{s<=t} exp(x_s),   D_t = t (1-based)
///
/// computed with a running max so that (a) the denominator never underflows
/// and (b) entry t depends only on x_1..x_t, which keeps the causal prefix
/// property bit-exact. A fixed whole-sequence shift would give the same
/// values up to rounding but would leak future rows into earlier entries at
/// the last bit.
pub fn causal_competition(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(FlowError::dim("causal_competition", format!("expected [seq, heads], got {:?}", x.shape())));
    }
    let (n, h) = (x.shape()[0], x.shape()[1]);
    let mut out = vec![0.0; n * h];
    for hh in 0..h {
        let mut running_max = f64::NEG_INFINITY;
        let mut denom = 0.0;
        for t in 0..n {
            let xt = x.data()[t * h + hh];
            if xt > running_max {
                denom *= (running_max - xt).exp();
                running_max = xt;
            }
            let e = (xt - running_max).exp();
            denom += e;
            out[t * h + hh] = (t + 1) as f64 * e / denom;
        }
    }
    Ok(Tensor::finish("causal_competition", vec![n, h], out, x.dtype()))
}

/// out_i = q_i . (sum_{j<=i} k_j^T v_j), per head, via one running
/// (per_head x per_head) state per head. O(n * e^2) total.
pub fn causal_dot_product(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    for (name, t) in [("q", q), ("k", k), ("v", v)] {
        if t.rank() != 3 {
            return Err(FlowError::dim(
                "causal_dot_product",
                format!("{name} must be [seq, heads, per_head], got {:?}", t.shape()),
            ));
        }
    }
    if q.shape() != k.shape() || q.shape()[..2] != v.shape()[..2] {
        return Err(FlowError::dim(
            "causal_dot_product",
            format!("shape mismatch: q {:?}, k {:?}, v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (n, h, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let f = v.shape()[2];
    let mut out = vec![0.0; n * h * f];
    let mut state = vec![0.0; e * f];
    for hh in 0..h {
        state.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..n {
            let krow = &k.data()[(i * h + hh) * e..(i * h + hh + 1) * e];
            let vrow = &v.data()[(i * h + hh) * f..(i * h + hh + 1) * f];
            for (a, &kv) in krow.iter().enumerate() {
                let srow = &mut state[a * f..(a + 1) * f];
                for (s, &vv) in srow.iter_mut().zip(vrow.iter()) {
                    *s += kv * vv;
                }
            }
            let qrow = &q.data()[(i * h + hh) * e..(i * h + hh + 1) * e];
            let orow = &mut out[(i * h + hh) * f..(i * h + hh + 1) * f];
            for (a, &qv) in qrow.iter().enumerate() {
                let srow = &state[a * f..(a + 1) * f];
                for (o, &s) in orow.iter_mut().zip(srow.iter()) {
                    *o += qv * s;
                }
            }
        }
    }
    Ok(Tensor::finish("causal_dot_product", vec![n, h, f], out, q.dtype().promote(k.dtype()).promote(v.dtype())))
}

/// Reject non-finite outputs with the head and flat index that produced them.
fn ensure_finite(op: &'static str, out: &Tensor, heads: usize) -> Result<()> {
    if let Some(pos) = out.data().iter().position(|v| !v.is_finite()) {
        let d = out.shape()[1];
        let head = (pos % d) / (d / heads);
        return Err(FlowError::internal(
            op,
            format!("non-finite output at row {}, head {head} (flat index {pos})", pos / d),
        ));
    }
    Ok(())
}
