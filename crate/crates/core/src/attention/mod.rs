//! Attention mechanisms over row-major [seq, channels] inputs.
//!
//! Four computation paths share one configuration type:
//! - [`canonical_attention`]: quadratic softmax attention, the reference
//!   semantics every linear mechanism is measured against;
//! - [`linear_attention_baseline`]: kernelized attention with phi = elu+1 and
//!   the (K^T V)-first contraction;
//! - [`flow_attention_normal`] / [`flow_attention_causal`]: attention as a
//!   conserved transport problem. Sources compete for a fixed outgoing
//!   capacity, sinks allocate a fixed incoming capacity, and both quantities
//!   come out of the same sums that make the mechanism linear in sequence
//!   length.
//!
//! Every mechanism reports [`FlowStats`] where defined; the canonical and
//! baseline paths have no flow interpretation and return none.

mod canonical;
mod flow;
pub mod heads;
mod linear;
mod oracle;

pub use canonical::{canonical_attention, canonical_attention_heads};
pub(crate) use canonical::causal_score_mask;
pub use flow::{
    causal_competition, causal_dot_product, flow_attention_causal, flow_attention_normal,
    flow_quantities_normal,
};
pub use linear::{linear_attention_baseline, linear_attention_baseline_heads};
pub use oracle::{flow_causal_prefix_oracle, flow_oracle_dense, DENSE_ORACLE_CAP};

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Which attention computation a config selects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    /// Quadratic softmax attention.
    Canonical,
    /// Kernelized linear attention, phi = elu+1, no flow normalization.
    LinearBaseline,
    /// Flow attention over the whole sequence.
    #[default]
    FlowNormal,
    /// Flow attention with prefix-only dependencies.
    FlowCausal,
    /// Dense re-association of flow attention; reference only, no gradients.
    FlowOracle,
}

impl Mechanism {
    pub const ALL: [Mechanism; 5] = [
        Mechanism::Canonical,
        Mechanism::LinearBaseline,
        Mechanism::FlowNormal,
        Mechanism::FlowCausal,
        Mechanism::FlowOracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Canonical => "canonical",
            Mechanism::LinearBaseline => "linear_baseline",
            Mechanism::FlowNormal => "flow_normal",
            Mechanism::FlowCausal => "flow_causal",
            Mechanism::FlowOracle => "flow_oracle",
        }
    }

    /// True when output row t can never depend on rows > t.
    pub fn is_causal(self) -> bool {
        matches!(self, Mechanism::FlowCausal)
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mechanism {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        Mechanism::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| FlowError::unsupported("mechanism", format!("unknown mechanism {s:?}")))
    }
}

/// Non-negative feature map applied to Q and K before any flow computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Phi {
    /// Bounded map; the final design.
    #[default]
    Sigmoid,
    /// elu(x) + 1, the kernelized-attention convention.
    EluPlusOne,
    /// Unbounded and can hit exact zeros; kept for ablations.
    Relu,
}

impl Phi {
    pub fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Phi::Sigmoid => x.sigmoid(),
            Phi::EluPlusOne => x.elu_plus_one(),
            Phi::Relu => x.relu(),
        }
    }

    pub(crate) fn apply_scalar(self, x: f64) -> f64 {
        match self {
            Phi::Sigmoid => crate::tensor::sigmoid_scalar(x),
            Phi::EluPlusOne => crate::tensor::elu_plus_one_scalar(x),
            Phi::Relu => x.max(0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phi::Sigmoid => "sigmoid",
            Phi::EluPlusOne => "elu_plus_one",
            Phi::Relu => "relu",
        }
    }
}

/// Activation that turns conserved outgoing flow into source competition
/// weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompetitionAct {
    #[default]
    Softmax,
    Sigmoid,
}

/// Activation that turns conserved incoming flow into sink allocation gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AllocationAct {
    #[default]
    Sigmoid,
    Softmax,
}

impl std::str::FromStr for Phi {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Phi::Sigmoid),
            "elu_plus_one" => Ok(Phi::EluPlusOne),
            "relu" => Ok(Phi::Relu),
            _ => Err(FlowError::unsupported("phi", format!("unknown feature map {s:?}"))),
        }
    }
}

impl std::str::FromStr for CompetitionAct {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(CompetitionAct::Softmax),
            "sigmoid" => Ok(CompetitionAct::Sigmoid),
            _ => Err(FlowError::unsupported("competition_act", format!("unknown activation {s:?}"))),
        }
    }
}

impl std::str::FromStr for AllocationAct {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(AllocationAct::Sigmoid),
            "softmax" => Ok(AllocationAct::Softmax),
            _ => Err(FlowError::unsupported("allocation_act", format!("unknown activation {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub mechanism: Mechanism,
    pub heads: usize,
    pub phi: Phi,
    /// Added to every guarded denominator; 0 is allowed and exact.
    pub eps: f64,
    pub competition_act: CompetitionAct,
    pub allocation_act: AllocationAct,
    /// Ablation switch: false replaces competition-weighted values with raw V.
    pub competition_enabled: bool,
    /// Ablation switch: false drops the allocation gate on the output.
    pub allocation_enabled: bool,
}

pub const DEFAULT_EPS: f64 = 1e-6;

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            mechanism: Mechanism::FlowNormal,
            heads: 1,
            phi: Phi::Sigmoid,
            eps: DEFAULT_EPS,
            competition_act: CompetitionAct::Softmax,
            allocation_act: AllocationAct::Sigmoid,
            competition_enabled: true,
            allocation_enabled: true,
        }
    }
}

impl AttentionConfig {
    pub fn with_heads(heads: usize) -> Self {
        AttentionConfig { heads, ..Default::default() }
    }
}

/// Per-token flow capacities, one column per head.
///
/// `incoming` (I, [n,h]) and `outgoing` (O, [m,h]) are the raw sink and
/// source capacities; `conserved_incoming` (I-hat, [n,h]) and
/// `conserved_outgoing` (O-hat, [m,h]) are the same quantities after the
/// conservation normalization, and are what competition and allocation act
/// on. Always detached from any gradient path.
#[derive(Clone, Debug)]
pub struct FlowStats {
    pub incoming: Tensor,
    pub outgoing: Tensor,
    pub conserved_incoming: Tensor,
    pub conserved_outgoing: Tensor,
}

/// Validate a Q/K/V triple and return (n, m, d).
pub(crate) fn check_qkv(op: &'static str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.rank() != 2 {
            return Err(FlowError::dim(op, format!("{name} must be rank 2 [seq, channels], got {:?}", t.shape())));
        }
    }
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let m = k.shape()[0];
    if k.shape()[1] != d || v.shape() != [m, d] {
        return Err(FlowError::dim(
            op,
            format!("inconsistent shapes Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    Ok((n, m, d))
}

pub(crate) fn check_heads(op: &'static str, d: usize, heads: usize) -> Result<usize> {
    if heads == 0 {
        return Err(FlowError::dim(op, "heads must be >= 1".to_string()));
    }
    if d % heads != 0 {
        return Err(FlowError::dim(op, format!("channels {d} not divisible by heads {heads}")));
    }
    Ok(d / heads)
}

/// Run the mechanism selected by `cfg`. `causal` asks for prefix-only
/// dependencies: it masks canonical attention, picks the prefix oracle, and
/// rejects the mechanisms that cannot honor it; `flow_causal` is causal
/// regardless. Stats are `None` for mechanisms without a flow reading.
pub fn attention_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<(Tensor, Option<FlowStats>)> {
    match cfg.mechanism {
        Mechanism::Canonical => Ok((canonical_attention_heads(q, k, v, cfg.heads, causal)?, None)),
        Mechanism::LinearBaseline => {
            if causal {
                return Err(FlowError::unsupported(
                    "attention_forward",
                    "linear_baseline has no causal variant; use flow_causal".to_string(),
                ));
            }
            Ok((linear_attention_baseline_heads(q, k, v, cfg.heads)?, None))
        }
        Mechanism::FlowNormal => {
            if causal {
                return Err(FlowError::unsupported(
                    "attention_forward",
                    "flow_normal attends to the whole sequence; use flow_causal for causal contexts".to_string(),
                ));
            }
            flow_attention_normal(q, k, v, cfg).map(|(out, stats)| (out, Some(stats)))
        }
        Mechanism::FlowCausal => flow_attention_causal(q, k, v, cfg).map(|(out, stats)| (out, Some(stats))),
        Mechanism::FlowOracle => {
            let out = if causal {
                flow_causal_prefix_oracle(q, k, v, cfg)?
            } else {
                flow_oracle_dense(q, k, v, cfg)?
            };
            // The oracle associates pairwise; its flow quantities are the
            // same sums the kernel path computes, so report those.
            let stats = flow::raw_flow_stats(q, k, cfg, causal)?;
            Ok((out, Some(stats)))
        }
    }
}
