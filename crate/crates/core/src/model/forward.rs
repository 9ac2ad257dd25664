//! The forward pass, written once on the autodiff tape.
//!
//! Layer l computes, in post-norm order,
//!
//!   Z = LayerNorm(Attention(X) + X)
//!   X' = LayerNorm(FFN(Z) + Z)
//!
//! with self-attention (Q = K = V = X projected per head) and a two-linear
//! FFN with x*sigmoid(x) between. Token and position embeddings add to form
//! X^0. The lm head projects every position; the classification head
//! mean-pools positions first.

use super::{parameter_shapes, HeadType, ModelConfig, LN_EPS};
use crate::attention::FlowStats;
use crate::autodiff::{attention_diff, Tape, Var};
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Taped forward. `causal` is the task's context and is passed through to
/// the attention dispatch, which masks canonical attention and rejects
/// whole-sequence mechanisms there. `dropout_rng` enables dropout: masks are
/// drawn from it at `cfg.dropout` only when the rate is positive, so passing
/// `None` (evaluation) and a rate of zero agree exactly.
///
/// Returns per-position or pooled logits plus one optional [`FlowStats`] per
/// layer for mechanisms with a flow reading.
pub fn forward_diff<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    params: &BTreeMap<String, Var<'t>>,
    tokens: &[usize],
    causal: bool,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t>, Vec<Option<FlowStats>>)> {
    cfg.validate()?;
    let n = tokens.len();
    if n == 0 || n > cfg.max_seq_len {
        return Err(FlowError::dim(
            "model_forward",
            format!("sequence length {n} must be in 1..={}", cfg.max_seq_len),
        ));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(FlowError::data(
            "model_forward",
            format!("token id {id} outside vocabulary of size {}", cfg.vocab_size),
        ));
    }
    for (name, shape) in parameter_shapes(cfg) {
        match params.get(&name) {
            None => {
                return Err(FlowError::contract("model_forward", format!("missing parameter {name}")))
            }
            Some(v) if v.shape() != shape => {
                return Err(FlowError::dim(
                    "model_forward",
                    format!("parameter {name} has shape {:?}, expected {shape:?}", v.shape()),
                ))
            }
            Some(_) => {}
        }
    }

    let attn_cfg = cfg.attn();
    let p = |name: &str| params[name];
    let linear = |x: Var<'t>, w: &str, b: &str| x.matmul(p(w)).add(p(b).broadcast_axis(0, n));
    let mut dropout = |x: Var<'t>| -> Var<'t> {
        let rate = cfg.dropout;
        match dropout_rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                // Inverted dropout: keep with probability 1-rate, rescale so
                // the expectation is unchanged.
                let keep = 1.0 / (1.0 - rate);
                let mask = Tensor::from_fn(x.shape().to_vec(), |_| {
                    if crate::rng::uniform(rng, 0.0, 1.0) < rate { 0.0 } else { keep }
                })
                .expect("mask shape");
                x.mul(tape.constant(mask))
            }
            _ => x,
        }
    };

    let positions: Vec<usize> = (0..n).collect();
    let mut x = p("embed.tok").gather_rows(tokens).add(p("embed.pos").gather_rows(&positions));

    let mut per_layer_stats = Vec::with_capacity(cfg.layers);
    for i in 0..cfg.layers {
        let name = |s: &str| format!("layers.{i}.{s}");
        let q = linear(x, &name("attn.wq"), &name("attn.bq"));
        let k = linear(x, &name("attn.wk"), &name("attn.bk"));
        let v = linear(x, &name("attn.wv"), &name("attn.bv"));
        let (ctx, stats) = attention_diff(q, k, v, &attn_cfg, causal)?;
        per_layer_stats.push(stats);
        let attn_out = dropout(linear(ctx, &name("attn.wo"), &name("attn.bo")));
        let z = attn_out.add(x).layer_norm(p(&name("ln1.gamma")), p(&name("ln1.beta")), LN_EPS);

        let h = linear(z, &name("ffn.w1"), &name("ffn.b1"));
        let h = h.mul(h.sigmoid());
        let f = dropout(linear(h, &name("ffn.w2"), &name("ffn.b2")));
        x = f.add(z).layer_norm(p(&name("ln2.gamma")), p(&name("ln2.beta")), LN_EPS);
    }

    let logits = match cfg.head {
        HeadType::Lm => {
            let w = if cfg.tie_lm_head { p("embed.tok").transpose_last2() } else { p("head.w") };
            x.matmul(w).add(p("head.b").broadcast_axis(0, n))
        }
        HeadType::Classification { num_classes } => {
            let pooled = x.sum_axis(0).scale(1.0 / n as f64).reshape(vec![1, cfg.channels]);
            pooled
                .matmul(p("head.w"))
                .add(p("head.b").reshape(vec![1, num_classes]))
                .reshape(vec![num_classes])
        }
    };
    Ok((logits, per_layer_stats))
}

/// Plain evaluation: run the taped forward against constant leaves and
/// detach. Pure given the parameter map; never applies dropout.
pub fn forward(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    tokens: &[usize],
    causal: bool,
) -> Result<(Tensor, Vec<Option<FlowStats>>)> {
    let tape = Tape::new();
    let vars = params.iter().map(|(k, v)| (k.clone(), tape.constant(v.clone()))).collect();
    let (out, stats) = forward_diff(&tape, cfg, &vars, tokens, causal, None)?;
    Ok((out.value(), stats))
}
