//! Character-level language modeling over a user-supplied text file.
//!
//! Tokens are single bytes and the vocabulary holds exactly the distinct
//! bytes the file contains, so no tokenizer model ships with the crate.
//! The stream splits the byte sequence by prefix into train and eval
//! regions, then cuts each into contiguous non-overlapping windows of
//! `seq_len` bytes; a window's first `seq_len - 1` bytes are the input and
//! its last `seq_len - 1` the next-byte targets.

use super::TaskBatch;
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;
use std::path::Path;
use std::sync::Arc;

/// Byte <-> token-id map for one corpus. Ids are dense, assigned in byte
/// order, so the same file always produces the same vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ByteVocab {
    bytes: Vec<u8>,
    id_of: [usize; 256],
}

const NO_ID: usize = usize::MAX;

impl ByteVocab {
    fn from_text(text: &str) -> ByteVocab {
        let mut present = [false; 256];
        for b in text.bytes() {
            present[b as usize] = true;
        }
        let bytes: Vec<u8> = (0..=255u8).filter(|&b| present[b as usize]).collect();
        let mut id_of = [NO_ID; 256];
        for (id, &b) in bytes.iter().enumerate() {
            id_of[b as usize] = id;
        }
        ByteVocab { bytes, id_of }
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        text.bytes()
            .map(|b| match self.id_of[b as usize] {
                NO_ID => Err(FlowError::data(
                    "byte_vocab",
                    format!("byte 0x{b:02x} is not in this corpus's vocabulary"),
                )),
                id => Ok(id),
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let bytes: Vec<u8> = ids
            .iter()
            .map(|&id| {
                self.bytes.get(id).copied().ok_or_else(|| {
                    FlowError::data("byte_vocab", format!("id {id} outside vocabulary of size {}", self.size()))
                })
            })
            .collect::<Result<_>>()?;
        String::from_utf8(bytes)
            .map_err(|e| FlowError::data("byte_vocab", format!("ids decode to invalid UTF-8: {e}")))
    }
}

/// Windows over one region of the corpus. Cloning restarts iteration;
/// [`CharLmStream::batch_cycled`] wraps around for open-ended training.
#[derive(Clone, Debug)]
pub struct CharLmStream {
    windows: Arc<Vec<Vec<usize>>>,
    cursor: usize,
}

impl CharLmStream {
    fn new(windows: Vec<Vec<usize>>) -> CharLmStream {
        CharLmStream { windows: Arc::new(windows), cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn window(&self, i: usize) -> &[usize] {
        &self.windows[i]
    }

    /// Next `batch` windows as an LM batch, wrapping at the end of the
    /// region. Input row t predicts the byte at t+1.
    pub fn batch_cycled(&mut self, batch: usize) -> Result<TaskBatch> {
        if self.is_empty() {
            return Err(FlowError::data("char_lm_stream", "region holds no windows".to_string()));
        }
        if batch == 0 {
            return Err(FlowError::contract("char_lm_stream", "batch must be >= 1".to_string()));
        }
        let n = self.windows[0].len() - 1;
        let mut inputs = Vec::with_capacity(batch * n);
        let mut targets = Vec::with_capacity(batch * n);
        for _ in 0..batch {
            let w = &self.windows[self.cursor];
            self.cursor = (self.cursor + 1) % self.windows.len();
            inputs.extend(w[..n].iter().map(|&id| id as f64));
            targets.extend(w[1..].iter().map(|&id| id as f64));
        }
        Ok(TaskBatch {
            inputs: Tensor::from_vec(vec![batch, n], inputs)?,
            targets: Tensor::from_vec(vec![batch, n], targets)?,
            loss_mask: Tensor::ones(vec![batch, n])?,
            causal: true,
        })
    }
}

impl Iterator for CharLmStream {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let w = self.windows.get(self.cursor)?.clone();
        self.cursor += 1;
        Some(w)
    }
}

/// Split a UTF-8 file into train and eval window streams plus its byte
/// vocabulary. The first `split_fraction` of the byte sequence (floored) is
/// the train region; windows never straddle the boundary.
pub fn load_char_lm(
    path: &Path,
    seq_len: usize,
    split_fraction: f64,
) -> Result<(CharLmStream, CharLmStream, ByteVocab)> {
    let op = "load_char_lm";
    if seq_len < 2 {
        return Err(FlowError::contract(op, "seq_len must be >= 2: a window holds an input byte and its target".to_string()));
    }
    if !(0.0 < split_fraction && split_fraction < 1.0) {
        return Err(FlowError::contract(op, format!("split_fraction {split_fraction} must be in (0, 1)")));
    }
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|e| FlowError::data(op, format!("{} is not valid UTF-8: {e}", path.display())))?;
    let chars = text.chars().count();
    if chars < 10 * seq_len {
        return Err(FlowError::data(
            op,
            format!("{} has {chars} characters; need at least {} (10 x seq_len {seq_len})", path.display(), 10 * seq_len),
        ));
    }
    let vocab = ByteVocab::from_text(&text);
    let ids = vocab.tokenize(&text).expect("vocabulary covers its own corpus");
    let train_len = (ids.len() as f64 * split_fraction).floor() as usize;
    let cut = |region: &[usize]| -> Vec<Vec<usize>> {
        region.chunks_exact(seq_len).map(|w| w.to_vec()).collect()
    };
    Ok((CharLmStream::new(cut(&ids[..train_len])), CharLmStream::new(cut(&ids[train_len..])), vocab))
}
