//! Deterministic task generators and the character-level text pipeline.
//!
//! Every generator is a pure function of (seed, parameters): identical seeds
//! give bit-identical batches on any platform, which is what makes the
//! training determinism contracts testable at all.
//!
//! Token ids travel in tensors for uniformity with the rest of the crate;
//! ids are small integers, exactly representable, and the row accessors
//! check that on the way out.

mod char_lm;
mod copy;
mod listops;

pub use char_lm::{load_char_lm, ByteVocab, CharLmStream};
pub use copy::{gen_copy_task, COPY_PAD, COPY_SEP};
pub use listops::{
    eval_listops_tokens, gen_listops_mini, listops_token_name, LISTOPS_CLASSES, LISTOPS_VOCAB,
};

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use std::io::Write;

/// One batch of a task: token-id inputs [batch, n], targets (per-position
/// [batch, n] or per-sample [batch]), a {0,1} loss mask [batch, n], and
/// whether the task is autoregressive. Masked positions carry target 0.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub loss_mask: Tensor,
    pub causal: bool,
}

fn id_at(t: &Tensor, flat: usize, what: &'static str) -> usize {
    let v = t.data()[flat];
    debug_assert!(v >= 0.0 && v.fract() == 0.0, "{what} {v} is not a token id");
    v as usize
}

impl TaskBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Per-position targets; false means one class id per sample.
    pub fn per_position(&self) -> bool {
        self.targets.rank() == 2
    }

    pub fn input_row(&self, row: usize) -> Vec<usize> {
        let n = self.seq_len();
        (0..n).map(|c| id_at(&self.inputs, row * n + c, "input")).collect()
    }

    pub fn target_row(&self, row: usize) -> Vec<usize> {
        assert!(self.per_position(), "per-sample targets; use target_class");
        let n = self.seq_len();
        (0..n).map(|c| id_at(&self.targets, row * n + c, "target")).collect()
    }

    pub fn target_class(&self, row: usize) -> usize {
        assert!(!self.per_position(), "per-position targets; use target_row");
        id_at(&self.targets, row, "target")
    }

    pub fn mask_row(&self, row: usize) -> Vec<bool> {
        let n = self.seq_len();
        (0..n).map(|c| self.loss_mask.data()[row * n + c] != 0.0).collect()
    }

    /// Structural checks: shapes line up, mask is {0,1}, ids are integers
    /// below `vocab`, and masked positions carry target 0.
    pub fn validate(&self, vocab: usize) -> Result<()> {
        let op = "task_batch";
        let (b, n) = (self.batch_size(), self.seq_len());
        if self.inputs.rank() != 2 {
            return Err(FlowError::dim(op, format!("inputs must be [batch, n], got {:?}", self.inputs.shape())));
        }
        if self.loss_mask.shape() != [b, n] {
            return Err(FlowError::dim(
                op,
                format!("loss_mask {:?} does not match inputs {:?}", self.loss_mask.shape(), self.inputs.shape()),
            ));
        }
        let per_position = match self.targets.shape() {
            s if s == [b, n] => true,
            s if s == [b] => false,
            s => {
                return Err(FlowError::dim(
                    op,
                    format!("targets must be [batch, n] or [batch], got {s:?} for batch {b}, n {n}"),
                ))
            }
        };
        for (name, t) in [("input", &self.inputs), ("target", &self.targets)] {
            if let Some(&v) = t.data().iter().find(|&&v| v < 0.0 || v.fract() != 0.0 || v >= vocab as f64) {
                return Err(FlowError::data(op, format!("{name} id {v} outside vocabulary of size {vocab}")));
            }
        }
        if let Some(&v) = self.loss_mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(FlowError::data(op, format!("loss mask entry {v} is not in {{0, 1}}")));
        }
        if per_position {
            for i in 0..b * n {
                if self.loss_mask.data()[i] == 0.0 && self.targets.data()[i] != 0.0 {
                    return Err(FlowError::data(op, format!("masked position {i} carries target {}", self.targets.data()[i])));
                }
            }
        }
        Ok(())
    }

    /// One JSON object per sample: input ids, target (list or single id),
    /// mask. The cross-implementation exchange format.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for row in 0..self.batch_size() {
            let input = self.input_row(row);
            let mask: Vec<u8> = self.mask_row(row).iter().map(|&m| m as u8).collect();
            let target = if self.per_position() {
                serde_json::json!(self.target_row(row))
            } else {
                serde_json::json!(self.target_class(row))
            };
            let line = serde_json::json!({ "input": input, "target": target, "mask": mask });
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Rows of ids to a [batch, n] tensor, padding short rows with `pad`.
pub(crate) fn rows_to_tensor(rows: &[Vec<usize>], width: usize, pad: usize) -> Tensor {
    let data: Vec<f64> = rows
        .iter()
        .flat_map(|row| (0..width).map(|c| row.get(c).copied().unwrap_or(pad) as f64))
        .collect();
    Tensor::from_vec(vec![rows.len(), width], data).expect("row grid")
}
