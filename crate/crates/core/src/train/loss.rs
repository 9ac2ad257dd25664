//! Mean masked cross-entropy, computed the log-sum-exp way.

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Mean negative log-likelihood over the unmasked rows of `logits`.
///
/// `logits` is [n, vocab]; `targets[i]` names the correct class of row i and
/// `mask[i]` selects the rows that count. Each row is shifted by its max
/// before exponentiation, so large logits stay finite. Masking out every row
/// leaves nothing to average and is a contract error.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let op = "cross_entropy";
    if logits.rank() != 2 {
        return Err(FlowError::dim(op, format!("logits must be [n, vocab], got {:?}", logits.shape())));
    }
    let (n, vocab) = (logits.shape()[0], logits.shape()[1]);
    if targets.len() != n || mask.len() != n {
        return Err(FlowError::dim(
            op,
            format!("{n} logit rows but {} targets and {} mask entries", targets.len(), mask.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        if targets[i] >= vocab {
            return Err(FlowError::domain(op, format!("target {} at row {i} is outside vocab {vocab}", targets[i])));
        }
        let row = &logits.data()[i * vocab..(i + 1) * vocab];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        total += max + sum.ln() - row[targets[i]];
        count += 1;
    }
    if count == 0 {
        return Err(FlowError::contract(op, "every position is masked; the mean is undefined".to_string()));
    }
    Ok(total / count as f64)
}

pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_log_vocab() {
        for vocab in [2, 7, 32] {
            let logits = Tensor::full(vec![3, vocab], 1.25).unwrap();
            let loss = cross_entropy(&logits, &[0, vocab - 1, 1], &[true; 3]).unwrap();
            assert!((loss - (vocab as f64).ln()).abs() <= 1e-12, "vocab {vocab}: {loss}");
        }
    }

    #[test]
    fn growing_margin_on_the_target_drives_the_loss_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [0.0, 1.0, 3.0, 10.0, 30.0] {
            let logits = Tensor::from_fn(vec![1, 5], |ix| if ix[1] == 2 { margin } else { 0.0 }).unwrap();
            let loss = cross_entropy(&logits, &[2], &[true]).unwrap();
            assert!(loss < prev, "loss must fall as the margin grows");
            prev = loss;
        }
        assert!(prev < 1e-12);
    }

    #[test]
    fn matches_the_naive_formula_on_moderate_logits() {
        let logits = Tensor::rand_uniform(&mut crate::rng::seeded(11), vec![6, 9], -3.0, 3.0).unwrap();
        let targets = [0, 4, 8, 2, 2, 7];
        let mask = [true, false, true, true, false, true];
        let stable = cross_entropy(&logits, &targets, &mask).unwrap();

        let mut naive = 0.0;
        let mut count = 0;
        for i in 0..6 {
            if !mask[i] {
                continue;
            }
            let row = &logits.data()[i * 9..(i + 1) * 9];
            let sum: f64 = row.iter().map(|z| z.exp()).sum();
            naive += -(row[targets[i]].exp() / sum).ln();
            count += 1;
        }
        naive /= count as f64;
        assert!((stable - naive).abs() <= 1e-12, "stable {stable} vs naive {naive}");
    }

    #[test]
    fn large_logits_stay_finite_where_the_naive_form_overflows() {
        let logits = Tensor::from_fn(vec![1, 3], |ix| 800.0 + ix[1] as f64).unwrap();
        let loss = cross_entropy(&logits, &[2], &[true]).unwrap();
        assert!(loss.is_finite());
        assert!((loss - (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln()).abs() <= 1e-12);
    }

    #[test]
    fn an_entirely_masked_batch_is_a_contract_error() {
        let logits = Tensor::zeros(vec![2, 4]).unwrap();
        let err = cross_entropy(&logits, &[0, 1], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("masked"), "{err}");
    }

    #[test]
    fn perplexity_is_the_exponential_of_the_loss() {
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity((8.0f64).ln()) - 8.0).abs() <= 1e-12);
    }
}
