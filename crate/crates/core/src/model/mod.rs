//! Flowformer blocks: token + learned position embeddings, attention and FFN
//! residual sublayers with post-norm, and the two output heads.
//!
//! The forward pass is written once, on the autodiff tape; [`forward`] wraps
//! it with constant leaves for plain evaluation. Parameter layout is defined
//! by [`parameter_shapes`] and everything else (initialization, checkpoints,
//! optimizer state) goes through those names, so the map is the model.

mod checkpoint;
mod forward;
mod init;

pub use checkpoint::{Checkpoint, TrainingState, CHECKPOINT_MAGIC};
pub use forward::{forward, forward_diff};
pub use init::init_parameters;

use crate::attention::AttentionConfig;
use crate::error::{FlowError, Result};
use serde::{Deserialize, Serialize};

/// Epsilon inside every layer-norm denominator.
pub const LN_EPS: f64 = 1e-5;

/// What the final projection produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    /// Per-position logits over the vocabulary.
    Lm,
    /// Mean-pool over positions, then project to class logits.
    Classification { num_classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub layers: usize,
    pub channels: usize,
    pub heads: usize,
    /// FFN hidden width; `None` means 4x channels.
    #[serde(default)]
    pub ffn_channels: Option<usize>,
    /// Attention settings. The `heads` inside are overridden by the model's
    /// own `heads` field, which is the single source of truth.
    #[serde(default)]
    pub attention: AttentionConfig,
    pub head: HeadType,
    /// Reuse `embed.tok` (transposed) as the LM output projection.
    #[serde(default)]
    pub tie_lm_head: bool,
    /// Dropout rate on sublayer outputs during training; 0 disables.
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "model_config";
        if self.layers == 0 {
            return Err(FlowError::contract(op, "layers must be >= 1".to_string()));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(FlowError::contract(
                op,
                format!("vocab_size {} and max_seq_len {} must be >= 1", self.vocab_size, self.max_seq_len),
            ));
        }
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return Err(FlowError::contract(
                op,
                format!("channels {} must be a positive multiple of heads {}", self.channels, self.heads),
            ));
        }
        if self.ffn_width() == 0 {
            return Err(FlowError::contract(op, "ffn_channels must be >= 1".to_string()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(FlowError::contract(op, format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        if self.tie_lm_head && !matches!(self.head, HeadType::Lm) {
            return Err(FlowError::contract(op, "tie_lm_head requires the lm head".to_string()));
        }
        if let HeadType::Classification { num_classes } = self.head {
            if num_classes == 0 {
                return Err(FlowError::contract(op, "num_classes must be >= 1".to_string()));
            }
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_channels.unwrap_or(4 * self.channels)
    }

    /// Attention config with the model's head count applied.
    pub fn attn(&self) -> AttentionConfig {
        AttentionConfig { heads: self.heads, ..self.attention }
    }

    /// Width of the final projection: vocab for lm, classes otherwise.
    pub fn output_dim(&self) -> usize {
        match self.head {
            HeadType::Lm => self.vocab_size,
            HeadType::Classification { num_classes } => num_classes,
        }
    }

    pub fn parameter_count(&self) -> usize {
        parameter_shapes(self).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Every trainable parameter the config implies, as (name, shape), in
/// initialization draw order. Tied LM heads drop `head.w`; the attention
/// mechanism never changes the layout.
pub fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.channels;
    let f = cfg.ffn_width();
    let mut out = vec![
        ("embed.tok".to_string(), vec![cfg.vocab_size, d]),
        ("embed.pos".to_string(), vec![cfg.max_seq_len, d]),
    ];
    for i in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("layers.{i}.attn.{w}"), vec![d, d]));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push((format!("layers.{i}.attn.{b}"), vec![d]));
        }
        out.push((format!("layers.{i}.ln1.gamma"), vec![d]));
        out.push((format!("layers.{i}.ln1.beta"), vec![d]));
        out.push((format!("layers.{i}.ffn.w1"), vec![d, f]));
        out.push((format!("layers.{i}.ffn.b1"), vec![f]));
        out.push((format!("layers.{i}.ffn.w2"), vec![f, d]));
        out.push((format!("layers.{i}.ffn.b2"), vec![d]));
        out.push((format!("layers.{i}.ln2.gamma"), vec![d]));
        out.push((format!("layers.{i}.ln2.beta"), vec![d]));
    }
    if !(cfg.tie_lm_head && matches!(cfg.head, HeadType::Lm)) {
        out.push(("head.w".to_string(), vec![d, cfg.output_dim()]));
    }
    out.push(("head.b".to_string(), vec![cfg.output_dim()]));
    out
}

#[cfg(test)]
pub(crate) fn test_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        max_seq_len: 8,
        layers: 1,
        channels: 4,
        heads: 2,
        ffn_channels: None,
        attention: AttentionConfig::default(),
        head: HeadType::Lm,
        tie_lm_head: false,
        dropout: 0.0,
    }
}
