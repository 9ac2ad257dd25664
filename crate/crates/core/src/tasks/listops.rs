//! Miniature nested list operations: prefix expressions over MIN, MAX,
//! MED (floor of the arithmetic median) and SM (sum mod 10) applied to
//! digits. The label is the expression's single-digit value, so the task is
//! 10-way classification where the model has to find the tokens that matter.

use super::{rows_to_tensor, TaskBatch};
use crate::error::{FlowError, Result};
use crate::rng::{seeded, uniform};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const LISTOPS_VOCAB: usize = 16;
pub const LISTOPS_CLASSES: usize = 10;

const PAD: usize = 0;
const OPEN_BASE: usize = 1; // [MIN, [MAX, [MED, [SM
const CLOSE: usize = 5;
const DIGIT_BASE: usize = 6;

/// Chance that a non-root position becomes a digit instead of nesting.
const LEAF_PROB: f64 = 0.4;

#[derive(Clone, Copy)]
enum Op {
    Min,
    Max,
    Med,
    Sm,
}

const OPS: [Op; 4] = [Op::Min, Op::Max, Op::Med, Op::Sm];

impl Op {
    fn apply(self, values: &[usize]) -> usize {
        match self {
            Op::Min => *values.iter().min().expect("args"),
            Op::Max => *values.iter().max().expect("args"),
            Op::Med => {
                let mut v = values.to_vec();
                v.sort_unstable();
                let k = v.len();
                if k % 2 == 1 { v[k / 2] } else { (v[k / 2 - 1] + v[k / 2]) / 2 }
            }
            Op::Sm => values.iter().sum::<usize>() % 10,
        }
    }
}

pub fn listops_token_name(id: usize) -> &'static str {
    const DIGITS: [&str; 10] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9"];
    match id {
        PAD => "pad",
        1 => "[MIN",
        2 => "[MAX",
        3 => "[MED",
        4 => "[SM",
        CLOSE => "]",
        d if (DIGIT_BASE..DIGIT_BASE + 10).contains(&d) => DIGITS[d - DIGIT_BASE],
        _ => "?",
    }
}

/// Emits at most `budget` tokens (callers guarantee `budget >= 1`) and
/// returns them with the subexpression's value.
fn gen_node(rng: &mut ChaCha8Rng, depth_left: usize, budget: usize, root: bool) -> (Vec<usize>, usize) {
    let must_leaf = depth_left == 0 || budget < 4;
    if must_leaf || (!root && uniform(rng, 0.0, 1.0) < LEAF_PROB) {
        let d = rng.random_range(0..10);
        return (vec![DIGIT_BASE + d], d);
    }
    let op_ix = rng.random_range(0..OPS.len());
    let inner = budget - 2; // room between "[op" and "]"
    let argc = rng.random_range(2..=inner.min(4));
    let mut rem = inner;
    let mut tokens = vec![OPEN_BASE + op_ix];
    let mut values = Vec::with_capacity(argc);
    for i in 0..argc {
        // Later arguments need one token each, whatever this one takes.
        let avail = rem - (argc - i - 1);
        let share = 1 + rng.random_range(0..avail);
        let (t, v) = gen_node(rng, depth_left - 1, share, false);
        rem -= t.len();
        tokens.extend(t);
        values.push(v);
    }
    tokens.push(CLOSE);
    (tokens, OPS[op_ix].apply(&values))
}

/// Deterministic classification batches. Every sample is an operator
/// expression (never a bare digit) of at most `max_len` tokens; rows are
/// right-padded to the batch's longest sample and the mask marks real
/// tokens.
pub fn gen_listops_mini(seed: u64, batch: usize, max_depth: usize, max_len: usize) -> Result<TaskBatch> {
    let op = "gen_listops_mini";
    if max_len > 512 {
        return Err(FlowError::contract(op, format!("max_len {max_len} exceeds the 512 cap")));
    }
    if max_len < 4 {
        return Err(FlowError::contract(op, format!("max_len {max_len} cannot hold an operator expression")));
    }
    if batch == 0 || max_depth == 0 {
        return Err(FlowError::contract(op, "batch and max_depth must be >= 1".to_string()));
    }
    let mut rng = seeded(seed);
    let mut rows = Vec::with_capacity(batch);
    let mut labels = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (tokens, value) = gen_node(&mut rng, max_depth, max_len, true);
        debug_assert!(tokens.len() <= max_len);
        rows.push(tokens);
        labels.push(value as f64);
    }
    let width = rows.iter().map(Vec::len).max().expect("batch >= 1");
    let mask: Vec<f64> = rows
        .iter()
        .flat_map(|row| (0..width).map(|c| if c < row.len() { 1.0 } else { 0.0 }))
        .collect();
    Ok(TaskBatch {
        inputs: rows_to_tensor(&rows, width, PAD),
        targets: Tensor::from_vec(vec![batch], labels)?,
        loss_mask: Tensor::from_vec(vec![batch, width], mask)?,
        causal: false,
    })
}

/// Independent evaluator: parses the token sequence back into nested lists
/// and reduces them recursively. Shares nothing with the generator's
/// construction except [`Op::apply`], so generator labels can be checked
/// against it.
pub fn eval_listops_tokens(tokens: &[usize]) -> Result<usize> {
    fn parse(tokens: &[usize], pos: usize) -> Result<(usize, usize)> {
        let op = "eval_listops_tokens";
        match tokens.get(pos) {
            Some(&t) if (DIGIT_BASE..DIGIT_BASE + 10).contains(&t) => Ok((t - DIGIT_BASE, pos + 1)),
            Some(&t) if (OPEN_BASE..OPEN_BASE + OPS.len()).contains(&t) => {
                let mut values = Vec::new();
                let mut pos = pos + 1;
                loop {
                    match tokens.get(pos) {
                        Some(&CLOSE) => break,
                        Some(_) => {
                            let (v, next) = parse(tokens, pos)?;
                            values.push(v);
                            pos = next;
                        }
                        None => return Err(FlowError::data(op, "unclosed expression".to_string())),
                    }
                }
                if values.is_empty() {
                    return Err(FlowError::data(op, format!("operator at {pos} has no arguments")));
                }
                Ok((OPS[t - OPEN_BASE].apply(&values), pos + 1))
            }
            Some(&t) => Err(FlowError::data(op, format!("unexpected token {t} ({}) at {pos}", listops_token_name(t)))),
            None => Err(FlowError::data(op, "empty expression".to_string())),
        }
    }
    let (value, end) = parse(tokens, 0)?;
    if end != tokens.len() {
        return Err(FlowError::data(
            "eval_listops_tokens",
            format!("trailing tokens after position {end}"),
        ));
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|w| match w {
                "[MIN" => 1,
                "[MAX" => 2,
                "[MED" => 3,
                "[SM" => 4,
                "]" => CLOSE,
                d => DIGIT_BASE + d.parse::<usize>().unwrap(),
            })
            .collect()
    }

    #[test]
    fn hand_evaluated_fixtures() {
        assert_eq!(eval_listops_tokens(&ids("[MAX 1 2 3 ]")).unwrap(), 3);
        assert_eq!(eval_listops_tokens(&ids("[SM 9 9 ]")).unwrap(), 8);
        assert_eq!(eval_listops_tokens(&ids("[MIN 7 [MAX 2 9 ] 4 ]")).unwrap(), 4);
        assert_eq!(eval_listops_tokens(&ids("[MED 1 4 9 ]")).unwrap(), 4);
        assert_eq!(eval_listops_tokens(&ids("[MED 1 4 6 9 ]")).unwrap(), 5, "even count floors the middle pair");
        assert!(eval_listops_tokens(&ids("[MAX 1 2")).is_err(), "unclosed");
    }

    #[test]
    fn generator_labels_match_the_independent_evaluator() {
        let mut checked = 0;
        for seed in 0..10 {
            let batch = gen_listops_mini(seed, 100, 3, 128).unwrap();
            batch.validate(LISTOPS_VOCAB).unwrap();
            for row in 0..batch.batch_size() {
                let tokens = batch.input_row(row);
                let mask = batch.mask_row(row);
                let real = mask.iter().filter(|&&m| m).count();
                assert!(mask[..real].iter().all(|&m| m), "mask is a prefix");
                let value = eval_listops_tokens(&tokens[..real]).unwrap();
                assert_eq!(value, batch.target_class(row), "seed {seed} row {row}");
                checked += 1;
            }
        }
        assert_eq!(checked, 1000);
    }

    #[test]
    fn fixed_seed_is_deterministic_and_respects_the_length_cap() {
        let a = gen_listops_mini(21, 50, 3, 64).unwrap();
        let b = gen_listops_mini(21, 50, 3, 64).unwrap();
        assert_eq!(a, b);
        assert!(a.seq_len() <= 64);
        for row in 0..50 {
            let first = a.input_row(row)[0];
            assert!((1..=4).contains(&first), "row {row} starts with an operator");
        }
        assert!(matches!(gen_listops_mini(1, 1, 3, 513), Err(FlowError::Contract { .. })));
    }
}
