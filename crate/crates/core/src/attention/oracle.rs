//! Reference implementations that materialize everything the fast paths
//! avoid. Scalar loops only, pairwise dots instead of contraction-first
//! association, fresh recomputation instead of running state. They exist to
//! disagree loudly if the linear algorithms drift from the dense semantics.

use super::{check_heads, check_qkv, AllocationAct, AttentionConfig, CompetitionAct};
use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

/// Largest n*m the dense oracle will materialize per head.
pub const DENSE_ORACLE_CAP: usize = 4096 * 4096;

fn feature(t: &Tensor, cfg: &AttentionConfig, row: usize, head: usize, a: usize) -> f64 {
    let e = t.shape()[1] / cfg.heads;
    cfg.phi.apply_scalar(t.at(&[row, head * e + a]))
}

/// Dense non-causal reference: builds the full n x m weight matrix
/// [(Qf_i / I_i) . Kf_j] per head and applies competition and allocation the
/// same way the linear path does, eps included.
pub fn flow_oracle_dense(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let (n, m, d) = check_qkv("flow_oracle_dense", q, k, v)?;
    let e = check_heads("flow_oracle_dense", d, cfg.heads)?;
    if n * m > DENSE_ORACLE_CAP {
        return Err(FlowError::resource(
            "flow_oracle_dense",
            format!("n*m = {} exceeds the dense cap {DENSE_ORACLE_CAP}", n * m),
        ));
    }
    let eps = cfg.eps;
    let mut out = vec![0.0; n * d];
    for hh in 0..cfg.heads {
        let qf = |i: usize, a: usize| feature(q, cfg, i, hh, a);
        let kf = |j: usize, a: usize| feature(k, cfg, j, hh, a);
        let dot = |i: usize, j: usize| (0..e).map(|a| qf(i, a) * kf(j, a)).sum::<f64>();

        let incoming: Vec<f64> = (0..n).map(|i| (0..m).map(|j| dot(i, j)).sum()).collect();
        let outgoing: Vec<f64> = (0..m).map(|j| (0..n).map(|i| dot(i, j)).sum()).collect();
        let conserved_in: Vec<f64> =
            (0..n).map(|i| (0..m).map(|j| dot(i, j) / (outgoing[j] + eps)).sum()).collect();
        let conserved_out: Vec<f64> =
            (0..m).map(|j| (0..n).map(|i| dot(i, j) / (incoming[i] + eps)).sum()).collect();

        let comp: Vec<f64> = if !cfg.competition_enabled {
            vec![1.0; m]
        } else {
            match cfg.competition_act {
                CompetitionAct::Softmax => naive_softmax(&conserved_out),
                CompetitionAct::Sigmoid => conserved_out.iter().map(|&x| crate::tensor::sigmoid_scalar(x)).collect(),
            }
        };
        let gate: Vec<f64> = if !cfg.allocation_enabled {
            vec![1.0; n]
        } else {
            match cfg.allocation_act {
                AllocationAct::Sigmoid => conserved_in.iter().map(|&x| crate::tensor::sigmoid_scalar(x)).collect(),
                AllocationAct::Softmax => naive_softmax(&conserved_in),
            }
        };

        for i in 0..n {
            for j in 0..m {
                let w = dot(i, j) / (incoming[i] + eps);
                for b in 0..e {
                    out[i * d + hh * e + b] += gate[i] * w * comp[j] * v.at(&[j, hh * e + b]);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, d], out)
}

/// Causal reference: output row t is produced by rerunning every flow
/// quantity from scratch on the prefix 0..=t with /position normalizations.
/// O(n^3) and proud of it.
pub fn flow_causal_prefix_oracle(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let (n, m, d) = check_qkv("flow_causal_prefix_oracle", q, k, v)?;
    if n != m {
        return Err(FlowError::dim("flow_causal_prefix_oracle", format!("need equal lengths, got {n} and {m}")));
    }
    let e = check_heads("flow_causal_prefix_oracle", d, cfg.heads)?;
    let eps = cfg.eps;
    let mut out = vec![0.0; n * d];
    for hh in 0..cfg.heads {
        let qf = |i: usize, a: usize| feature(q, cfg, i, hh, a);
        let kf = |j: usize, a: usize| feature(k, cfg, j, hh, a);
        let dot = |i: usize, j: usize| (0..e).map(|a| qf(i, a) * kf(j, a)).sum::<f64>();
        let pos = |i: usize| (i + 1) as f64;

        for t in 0..n {
            // Capacities of every prefix row, each from its own fresh sums.
            let incoming: Vec<f64> =
                (0..=t).map(|i| (0..=i).map(|j| dot(i, j)).sum::<f64>() / pos(i)).collect();
            let outgoing: Vec<f64> =
                (0..=t).map(|j| (0..=j).map(|i| dot(i, j)).sum::<f64>() / pos(j)).collect();
            let conserved_in_t =
                (0..=t).map(|j| dot(t, j) / (outgoing[j] + eps)).sum::<f64>() / pos(t);
            let conserved_out: Vec<f64> = (0..=t)
                .map(|s| (0..=s).map(|i| dot(i, s) / (incoming[i] + eps)).sum::<f64>() / pos(s))
                .collect();

            let comp: Vec<f64> = if !cfg.competition_enabled {
                vec![1.0; t + 1]
            } else {
                match cfg.competition_act {
                    CompetitionAct::Softmax => {
                        (0..=t).map(|s| pos(s) * prefix_softmax_weight(&conserved_out, s)).collect()
                    }
                    CompetitionAct::Sigmoid => {
                        conserved_out.iter().map(|&x| crate::tensor::sigmoid_scalar(x)).collect()
                    }
                }
            };
            let gate = if !cfg.allocation_enabled {
                1.0
            } else {
                match cfg.allocation_act {
                    AllocationAct::Sigmoid => crate::tensor::sigmoid_scalar(conserved_in_t),
                    AllocationAct::Softmax => {
                        let conserved_in_all: Vec<f64> = (0..=t)
                            .map(|i| (0..=i).map(|j| dot(i, j) / (outgoing[j] + eps)).sum::<f64>() / pos(i))
                            .collect();
                        pos(t) * prefix_softmax_weight(&conserved_in_all, t)
                    }
                }
            };

            for j in 0..=t {
                let w = dot(t, j) / (incoming[t] * pos(t) + eps);
                for b in 0..e {
                    out[t * d + hh * e + b] += gate * w * comp[j] * v.at(&[j, hh * e + b]);
                }
            }
        }
    }
    Tensor::from_vec(vec![n, d], out)
}

/// softmax(x)[s] over the prefix 0..=s only, with a fixed shift equal to the
/// prefix max; a deliberately different stabilization than the streaming
/// rescale in the kernel.
fn prefix_softmax_weight(x: &[f64], s: usize) -> f64 {
    let mx = x[..=s].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = x[..=s].iter().map(|&v| (v - mx).exp()).sum();
    (x[s] - mx).exp() / denom
}

fn naive_softmax(x: &[f64]) -> Vec<f64> {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - mx).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.iter().map(|&v| v / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{flow_attention_causal, flow_attention_normal, Phi};
    use crate::rng::seeded;
    use crate::tensor::max_rel_err;

    fn seeded_qkv(seed: u64, n: usize, m: usize, d: usize) -> (Tensor, Tensor, Tensor) {
        let mut rng = seeded(seed);
        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).unwrap();
        let k = Tensor::rand_uniform(&mut rng, vec![m, d], -2.0, 2.0).unwrap();
        let v = Tensor::rand_uniform(&mut rng, vec![m, d], -2.0, 2.0).unwrap();
        (q, k, v)
    }

    #[test]
    fn normal_path_matches_dense_oracle() {
        for (seed, n, m, d, h) in [(1u64, 6, 6, 4, 1), (2, 9, 5, 6, 2), (3, 3, 11, 8, 4), (4, 1, 7, 4, 2)] {
            let (q, k, v) = seeded_qkv(seed, n, m, d);
            let cfg = AttentionConfig { heads: h, ..Default::default() };
            let (fast, _) = flow_attention_normal(&q, &k, &v, &cfg).unwrap();
            let dense = flow_oracle_dense(&q, &k, &v, &cfg).unwrap();
            let err = max_rel_err(&fast, &dense);
            assert!(err <= 1e-10, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn normal_path_matches_dense_oracle_without_eps() {
        let (q, k, v) = seeded_qkv(5, 8, 8, 6);
        let cfg = AttentionConfig { heads: 3, eps: 0.0, ..Default::default() };
        let (fast, _) = flow_attention_normal(&q, &k, &v, &cfg).unwrap();
        let dense = flow_oracle_dense(&q, &k, &v, &cfg).unwrap();
        assert!(max_rel_err(&fast, &dense) <= 1e-10);
    }

    #[test]
    fn causal_path_matches_prefix_oracle() {
        for (seed, n, d, h) in [(11u64, 1, 4, 1), (12, 5, 4, 2), (13, 12, 8, 4), (14, 9, 6, 1)] {
            let (q, k, v) = seeded_qkv(seed, n, n, d);
            let cfg = AttentionConfig { heads: h, ..Default::default() };
            let (fast, _) = flow_attention_causal(&q, &k, &v, &cfg).unwrap();
            let oracle = flow_causal_prefix_oracle(&q, &k, &v, &cfg).unwrap();
            let err = max_rel_err(&fast, &oracle);
            assert!(err <= 1e-10, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn oracles_track_every_ablation_config() {
        let (q, k, v) = seeded_qkv(21, 7, 7, 4);
        let base = AttentionConfig { heads: 2, ..Default::default() };
        let variants = [
            AttentionConfig { phi: Phi::EluPlusOne, ..base },
            AttentionConfig { phi: Phi::Relu, ..base },
            AttentionConfig { competition_act: CompetitionAct::Sigmoid, ..base },
            AttentionConfig { allocation_act: AllocationAct::Softmax, ..base },
            AttentionConfig { competition_enabled: false, ..base },
            AttentionConfig { allocation_enabled: false, ..base },
        ];
        for cfg in variants {
            let (fast_n, _) = flow_attention_normal(&q, &k, &v, &cfg).unwrap();
            let dense = flow_oracle_dense(&q, &k, &v, &cfg).unwrap();
            assert!(max_rel_err(&fast_n, &dense) <= 1e-10, "normal mismatch for {cfg:?}");
            let (fast_c, _) = flow_attention_causal(&q, &k, &v, &cfg).unwrap();
            let oracle = flow_causal_prefix_oracle(&q, &k, &v, &cfg).unwrap();
            assert!(max_rel_err(&fast_c, &oracle) <= 1e-10, "causal mismatch for {cfg:?}");
        }
    }

    #[test]
    fn dense_oracle_refuses_oversized_requests() {
        let q = Tensor::zeros(vec![4097, 1]).unwrap();
        let k = Tensor::zeros(vec![4097, 1]).unwrap();
        let v = Tensor::zeros(vec![4097, 1]).unwrap();
        let err = flow_oracle_dense(&q, &k, &v, &AttentionConfig::default()).unwrap_err();
        assert!(matches!(err, FlowError::Resource { .. }), "got {err}");
    }
}
