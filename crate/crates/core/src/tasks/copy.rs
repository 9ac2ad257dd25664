//! The copy task: remember a token run across a separator.
//!
//! Input is `run + SEP + placeholders`, target is the run again at the
//! placeholder positions. A causal model must carry the run through its
//! state to score, which makes this the smallest task that separates "can
//! attend selectively" from "cannot".

use super::{rows_to_tensor, TaskBatch};
use crate::error::{FlowError, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;
use rand::Rng;

pub const COPY_PAD: usize = 0;
pub const COPY_SEP: usize = 1;

/// Deterministic copy batches. `vocab` reserves ids 0 (pad) and 1 (sep);
/// data tokens are drawn from the rest. `seq_len` must be odd so the run
/// and placeholder halves match around the separator.
pub fn gen_copy_task(seed: u64, batch: usize, seq_len: usize, vocab: usize) -> Result<TaskBatch> {
    let op = "gen_copy_task";
    if vocab < 4 {
        return Err(FlowError::contract(op, format!("vocab {vocab} must be >= 4 to reserve pad/sep and leave data tokens")));
    }
    if batch == 0 {
        return Err(FlowError::contract(op, "batch must be >= 1".to_string()));
    }
    if seq_len < 3 || seq_len % 2 == 0 {
        return Err(FlowError::contract(
            op,
            format!("seq_len {seq_len} must be odd and >= 3: run + separator + run"),
        ));
    }
    let run = (seq_len - 1) / 2;
    let mut rng = seeded(seed);
    let mut inputs = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch);
    for _ in 0..batch {
        let tokens: Vec<usize> = (0..run).map(|_| rng.random_range(2..vocab)).collect();
        let mut input = tokens.clone();
        input.push(COPY_SEP);
        input.extend(std::iter::repeat_n(COPY_PAD, run));
        let mut target = vec![0usize; run + 1];
        target.extend_from_slice(&tokens);
        inputs.push(input);
        targets.push(target);
    }
    let mask_row: Vec<f64> = (0..seq_len).map(|t| if t > run { 1.0 } else { 0.0 }).collect();
    let loss_mask = Tensor::from_vec(
        vec![batch, seq_len],
        mask_row.iter().copied().cycle().take(batch * seq_len).collect(),
    )?;
    Ok(TaskBatch {
        inputs: rows_to_tensor(&inputs, seq_len, COPY_PAD),
        targets: rows_to_tensor(&targets, seq_len, 0),
        loss_mask,
        causal: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_seed_gives_identical_batches() {
        let a = gen_copy_task(11, 8, 9, 16).unwrap();
        let b = gen_copy_task(11, 8, 9, 16).unwrap();
        assert_eq!(a, b);
        let c = gen_copy_task(12, 8, 9, 16).unwrap();
        assert_ne!(a.inputs.data(), c.inputs.data());
    }

    #[test]
    fn mask_covers_exactly_the_second_half() {
        let batch = gen_copy_task(5, 6, 11, 8).unwrap();
        for row in 0..6 {
            let sum: f64 = batch.mask_row(row).iter().map(|&m| m as usize as f64).sum();
            assert_eq!(sum, 5.0, "(seq_len - 1) / 2 unmasked targets per row");
        }
        batch.validate(8).unwrap();
    }

    #[test]
    fn second_half_target_equals_first_half_input() {
        let batch = gen_copy_task(7, 4, 9, 10).unwrap();
        for row in 0..4 {
            let input = batch.input_row(row);
            let target = batch.target_row(row);
            assert_eq!(input[4], COPY_SEP);
            assert_eq!(&input[5..], &[COPY_PAD; 4], "placeholders after the separator");
            assert_eq!(&target[5..], &input[..4], "target repeats the run");
            assert!(input[..4].iter().all(|&t| t >= 2), "data tokens avoid pad and sep");
        }
    }

    #[test]
    fn three_token_fixture_spelled_out() {
        // seq_len 3: one data token x, then SEP, then one placeholder; the
        // only scored position is the last, and it must reproduce x.
        let batch = gen_copy_task(2, 1, 3, 4).unwrap();
        let input = batch.input_row(0);
        let x = input[0];
        assert!(x == 2 || x == 3, "data token from the unreserved range");
        assert_eq!(input, vec![x, COPY_SEP, COPY_PAD]);
        assert_eq!(batch.target_row(0), vec![0, 0, x]);
        assert_eq!(batch.mask_row(0), vec![false, false, true]);
        assert!(batch.causal);
    }
}
