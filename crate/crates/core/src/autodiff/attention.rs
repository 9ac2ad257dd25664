//! Differentiable attention, op for op the same chains as the eager paths.
//!
//! Because every taped op computes its forward value with the eager kernel,
//! these functions produce bit-identical outputs to their eager counterparts;
//! the tests pin that down with exact equality. Shapes are validated by the
//! first kernel that touches them, so malformed inputs panic rather than
//! returning errors: run the eager path first if the inputs are untrusted.
//!
//! Flow statistics come back as detached tensors. Gradients still flow
//! through the competition and allocation terms, which are rebuilt on the
//! tape from the same conserved quantities.

use super::Var;
use crate::attention::{
    causal_score_mask, AllocationAct, AttentionConfig, CompetitionAct, FlowStats, Mechanism,
    DEFAULT_EPS,
};
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Taped mirror of the non-causal flow attention path.
pub fn flow_normal_diff<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    cfg: &AttentionConfig,
) -> (Var<'t>, FlowStats) {
    let qf = q.split_heads(cfg.heads).phi(cfg.phi);
    let kf = k.split_heads(cfg.heads).phi(cfg.phi);
    let vh = v.split_heads(cfg.heads);
    let n = qf.shape()[0];
    let m = kf.shape()[0];

    let ksum = kf.sum_axis(0);
    let incoming = qf.mul(ksum.broadcast_axis(0, n)).sum_axis(2);
    let qsum = qf.sum_axis(0);
    let outgoing = kf.mul(qsum.broadcast_axis(0, m)).sum_axis(2);

    let k_over_o = kf.stable_div(outgoing, cfg.eps);
    let conserved_incoming = qf.mul(k_over_o.sum_axis(0).broadcast_axis(0, n)).sum_axis(2);
    let q_over_i = qf.stable_div(incoming, cfg.eps);
    let conserved_outgoing = kf.mul(q_over_i.sum_axis(0).broadcast_axis(0, m)).sum_axis(2);

    let v_hat = if cfg.competition_enabled {
        let comp = match cfg.competition_act {
            CompetitionAct::Softmax => conserved_outgoing.softmax_axis(0),
            CompetitionAct::Sigmoid => conserved_outgoing.sigmoid(),
        };
        vh.mul(comp)
    } else {
        vh
    };

    let ctx = kf.contract_seq(v_hat);
    let agg = q_over_i.apply_per_head(ctx);

    let r = if cfg.allocation_enabled {
        let gate = match cfg.allocation_act {
            AllocationAct::Sigmoid => conserved_incoming.sigmoid(),
            AllocationAct::Softmax => conserved_incoming.softmax_axis(0),
        };
        agg.mul(gate)
    } else {
        agg
    };

    let stats = FlowStats {
        incoming: incoming.value(),
        outgoing: outgoing.value(),
        conserved_incoming: conserved_incoming.value(),
        conserved_outgoing: conserved_outgoing.value(),
    };
    (r.merge_heads(), stats)
}

/// Taped mirror of the causal flow attention path.
pub fn flow_causal_diff<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    cfg: &AttentionConfig,
) -> (Var<'t>, FlowStats) {
    let qf = q.split_heads(cfg.heads).phi(cfg.phi);
    let kf = k.split_heads(cfg.heads).phi(cfg.phi);
    let vh = v.split_heads(cfg.heads);
    let n = qf.shape()[0];
    assert_eq!(n, kf.shape()[0], "flow_causal_diff: causal attention needs equal lengths");

    let positions = q
        .tape
        .constant(Tensor::from_fn(vec![n, cfg.heads], |ix| (ix[0] + 1) as f64).expect("positions"));

    let incoming = qf.mul(kf.cumsum_axis(0)).sum_axis(2).stable_div(positions, 0.0);
    let outgoing = kf.mul(qf.cumsum_axis(0)).sum_axis(2).stable_div(positions, 0.0);
    let k_over_o = kf.stable_div(outgoing, cfg.eps);
    let conserved_incoming =
        qf.mul(k_over_o.cumsum_axis(0)).sum_axis(2).stable_div(positions, 0.0);
    let q_over_i = qf.stable_div(incoming, cfg.eps);
    let conserved_outgoing =
        kf.mul(q_over_i.cumsum_axis(0)).sum_axis(2).stable_div(positions, 0.0);

    let v_hat = if cfg.competition_enabled {
        let comp = match cfg.competition_act {
            CompetitionAct::Softmax => conserved_outgoing.causal_competition(),
            CompetitionAct::Sigmoid => conserved_outgoing.sigmoid(),
        };
        vh.mul(comp)
    } else {
        vh
    };

    let i_times_d = incoming.mul(positions);
    let q_norm = qf.stable_div(i_times_d, cfg.eps);
    let cdp = q_norm.causal_dot_product(kf, v_hat);

    let r = if cfg.allocation_enabled {
        let gate = match cfg.allocation_act {
            AllocationAct::Sigmoid => conserved_incoming.sigmoid(),
            AllocationAct::Softmax => conserved_incoming.causal_competition(),
        };
        cdp.mul(gate)
    } else {
        cdp
    };

    let stats = FlowStats {
        incoming: incoming.value(),
        outgoing: outgoing.value(),
        conserved_incoming: conserved_incoming.value(),
        conserved_outgoing: conserved_outgoing.value(),
    };
    (r.merge_heads(), stats)
}

/// Taped mirror of canonical softmax attention.
pub fn canonical_diff<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize, causal: bool) -> Var<'t> {
    let qh = q.split_heads(heads);
    let kh = k.split_heads(heads);
    let vh = v.split_heads(heads);
    let n = qh.shape()[0];
    let m = kh.shape()[0];
    let mut scores = qh.scores_qk(kh);
    if causal {
        let mask = q.tape.constant(causal_score_mask(heads, n, m).expect("mask shape"));
        scores = scores.add(mask);
    }
    scores.softmax_axis(2).attn_apply_v(vh).merge_heads()
}

/// Taped mirror of the kernelized linear attention baseline.
pub fn linear_baseline_diff<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Var<'t> {
    let qf = q.split_heads(heads).elu_plus_one();
    let kf = k.split_heads(heads).elu_plus_one();
    let vh = v.split_heads(heads);
    let n = qf.shape()[0];
    let ctx = kf.contract_seq(vh);
    let num = qf.apply_per_head(ctx);
    let ksum = kf.sum_axis(0);
    let den = qf.mul(ksum.broadcast_axis(0, n)).sum_axis(2);
    num.stable_div(den, DEFAULT_EPS).merge_heads()
}

/// Taped counterpart of [`crate::attention::attention_forward`]: same
/// mechanism selection, same causal-context rules, gradients recorded. The
/// dense oracle is forward-only and is rejected here.
pub fn attention_diff<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<(Var<'t>, Option<FlowStats>)> {
    match cfg.mechanism {
        Mechanism::Canonical => Ok((canonical_diff(q, k, v, cfg.heads, causal), None)),
        Mechanism::LinearBaseline => {
            if causal {
                return Err(FlowError::unsupported(
                    "attention_diff",
                    "linear_baseline has no causal variant; use flow_causal".to_string(),
                ));
            }
            Ok((linear_baseline_diff(q, k, v, cfg.heads), None))
        }
        Mechanism::FlowNormal => {
            if causal {
                return Err(FlowError::unsupported(
                    "attention_diff",
                    "flow_normal attends to the whole sequence; use flow_causal for causal contexts".to_string(),
                ));
            }
            let (out, stats) = flow_normal_diff(q, k, v, cfg);
            Ok((out, Some(stats)))
        }
        Mechanism::FlowCausal => {
            let (out, stats) = flow_causal_diff(q, k, v, cfg);
            Ok((out, Some(stats)))
        }
        Mechanism::FlowOracle => Err(FlowError::unsupported(
            "attention_diff",
            "the dense oracle records no gradients; pick a kernel mechanism".to_string(),
        )),
    }
}
