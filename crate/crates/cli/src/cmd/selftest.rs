//! `selftest`: the library's core invariants at fixed seeds, fast enough to
//! gate a commit.
//!
//! Four suites: conservation identities, kernel-vs-oracle equivalence,
//! causal prefix isolation, and gradient checks. Every suite reports
//! pass/fail on its own line; the process exits nonzero naming the first
//! violated property. The env var below overrides the conservation eps and
//! exists purely as a fault-injection hook for the test suite.

use crate::Failure;
use flowformer::attention::heads::split_heads;
use flowformer::attention::{
    flow_attention_causal, flow_attention_normal, flow_causal_prefix_oracle, flow_oracle_dense,
    flow_quantities_normal, AttentionConfig, Phi,
};
use flowformer::autodiff::{
    finite_diff_check, flow_causal_diff, flow_normal_diff, primitive_gradcheck, FD_STEP,
};
use flowformer::rng::{seeded, uniform, ChaCha8Rng};
use flowformer::tensor::{max_rel_err, Tensor};
use std::collections::BTreeMap;
use std::time::Instant;

const EPS_HOOK: &str = "FLOWFORMER_SELFTEST_EPS";

type Suite = fn() -> Result<(), String>;

pub fn run() -> Result<(), Failure> {
    let suites: [(&str, Suite); 4] = [
        ("conservation", conservation),
        ("oracle_equivalence", oracle_equivalence),
        ("causality", causality),
        ("gradients", gradients),
    ];
    let mut first: Option<String> = None;
    for (name, suite) in suites {
        let t0 = Instant::now();
        match suite() {
            Ok(()) => println!("PASS {name} ({:.2}s)", t0.elapsed().as_secs_f64()),
            Err(msg) => {
                println!("FAIL {name}: {msg}");
                first.get_or_insert_with(|| format!("{name}: {msg}"));
            }
        }
    }
    match first {
        None => {
            println!("all suites passed");
            Ok(())
        }
        Some(msg) => Err(Failure::Property(format!("selftest {msg}"))),
    }
}

fn size(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    (uniform(rng, lo as f64, hi as f64 + 1.0) as usize).clamp(lo, hi)
}

/// Both conservation identities at eps 0: dividing by one's own capacity
/// and re-contracting against the opposite side's feature sum gives exactly
/// one unit of flow per token.
fn conservation() -> Result<(), String> {
    let eps: f64 = match std::env::var(EPS_HOOK) {
        Ok(s) => s.parse().map_err(|_| format!("{EPS_HOOK} must hold a float, got {s:?}"))?,
        Err(_) => 0.0,
    };
    for seed in 0..20u64 {
        let mut rng = seeded(seed);
        let n = size(&mut rng, 1, 48);
        let m = size(&mut rng, 1, 48);
        let h = [1, 2, 4][(seed % 3) as usize];
        let e = size(&mut rng, 1, 6);
        let d = h * e;
        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let k = Tensor::rand_uniform(&mut rng, vec![m, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let qf = Phi::Sigmoid.apply(&split_heads(&q, h).map_err(|err| err.to_string())?);
        let kf = Phi::Sigmoid.apply(&split_heads(&k, h).map_err(|err| err.to_string())?);
        let stats = flow_quantities_normal(&qf, &kf, eps).map_err(|err| err.to_string())?;

        let qsum = qf.sum_axis(0).map_err(|err| err.to_string())?;
        let ksum = kf.sum_axis(0).map_err(|err| err.to_string())?;
        for hh in 0..h {
            for j in 0..m {
                let mut total = 0.0;
                for a in 0..e {
                    total += kf.at(&[j, hh, a]) / stats.outgoing.at(&[j, hh]) * qsum.at(&[hh, a]);
                }
                if (total - 1.0).abs() > 1e-10 {
                    return Err(format!("seed {seed}: source {j} head {hh} carries {total}, not 1"));
                }
            }
            for i in 0..n {
                let mut total = 0.0;
                for a in 0..e {
                    total += qf.at(&[i, hh, a]) / stats.incoming.at(&[i, hh]) * ksum.at(&[hh, a]);
                }
                if (total - 1.0).abs() > 1e-10 {
                    return Err(format!("seed {seed}: sink {i} head {hh} receives {total}, not 1"));
                }
            }
        }
    }
    Ok(())
}

/// The linear-time kernels against their dense re-association oracles.
fn oracle_equivalence() -> Result<(), String> {
    for seed in 100..120u64 {
        let mut rng = seeded(seed);
        let n = size(&mut rng, 1, 40);
        let m = size(&mut rng, 1, 40);
        let h = [1, 2, 4][(seed % 3) as usize];
        let e = size(&mut rng, 1, 8);
        let d = h * e;
        let cfg = AttentionConfig::with_heads(h);

        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let k = Tensor::rand_uniform(&mut rng, vec![m, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let v = Tensor::rand_uniform(&mut rng, vec![m, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let (fast, _) = flow_attention_normal(&q, &k, &v, &cfg).map_err(|err| err.to_string())?;
        let dense = flow_oracle_dense(&q, &k, &v, &cfg).map_err(|err| err.to_string())?;
        let err = max_rel_err(&fast, &dense);
        if err > 1e-10 {
            return Err(format!("seed {seed}: normal vs dense oracle rel err {err:.3e}"));
        }

        let kq = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let kv = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let (fast, _) = flow_attention_causal(&q, &kq, &kv, &cfg).map_err(|err| err.to_string())?;
        let prefix = flow_causal_prefix_oracle(&q, &kq, &kv, &cfg).map_err(|err| err.to_string())?;
        let err = max_rel_err(&fast, &prefix);
        if err > 1e-10 {
            return Err(format!("seed {seed}: causal vs prefix oracle rel err {err:.3e}"));
        }
    }
    Ok(())
}

/// Perturbing rows at or after position t leaves rows before t bit-identical.
fn causality() -> Result<(), String> {
    for trial in 0..10u64 {
        let mut rng = seeded(200 + trial);
        let n = size(&mut rng, 2, 24);
        let d = 2 * size(&mut rng, 1, 4);
        let cfg = AttentionConfig::with_heads(2);
        let t = size(&mut rng, 1, n - 1);
        let bump_size = uniform(&mut rng, 0.5, 25.0);

        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let k = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let v = Tensor::rand_uniform(&mut rng, vec![n, d], -2.0, 2.0).map_err(|err| err.to_string())?;
        let bump = |x: &Tensor| {
            Tensor::from_fn(x.shape().to_vec(), |ix| {
                x.at(ix) + if ix[0] >= t { bump_size } else { 0.0 }
            })
            .expect("same shape")
        };
        let (base, _) = flow_attention_causal(&q, &k, &v, &cfg).map_err(|err| err.to_string())?;
        let (pert, _) =
            flow_attention_causal(&bump(&q), &bump(&k), &bump(&v), &cfg).map_err(|err| err.to_string())?;
        for i in 0..t {
            for a in 0..d {
                let (x, y) = (base.at(&[i, a]), pert.at(&[i, a]));
                if x.to_bits() != y.to_bits() {
                    return Err(format!(
                        "trial {trial}: prefix row {i} channel {a} moved from {x} to {y} under a future perturbation"
                    ));
                }
            }
        }
    }
    Ok(())
}

/// Primitive adjoints at 1e-6 and whole flow mechanisms at 1e-4 against
/// central finite differences.
fn gradients() -> Result<(), String> {
    for (label, err) in primitive_gradcheck(41).map_err(|e| e.to_string())? {
        if err > 1e-6 {
            return Err(format!("primitive {label} rel err {err:.3e} exceeds 1e-6"));
        }
    }

    let qkv = |seed: u64, n: usize, m: usize, d: usize| {
        let mut rng = seeded(seed);
        BTreeMap::from([
            ("q".to_string(), Tensor::rand_uniform(&mut rng, vec![n, d], -1.0, 1.0).expect("shape")),
            ("k".to_string(), Tensor::rand_uniform(&mut rng, vec![m, d], -1.0, 1.0).expect("shape")),
            ("v".to_string(), Tensor::rand_uniform(&mut rng, vec![m, d], -1.0, 1.0).expect("shape")),
        ])
    };
    let cfg = AttentionConfig::with_heads(2);
    let report = finite_diff_check(
        |_, v| flow_normal_diff(v["q"], v["k"], v["v"], &cfg).0.sum_all(),
        &qkv(42, 5, 4, 4),
        FD_STEP,
    )
    .map_err(|e| e.to_string())?;
    if !report.passes(1e-4) {
        return Err(format!("flow_normal gradients rel err {:.3e} exceeds 1e-4", report.max_rel_err));
    }
    let report = finite_diff_check(
        |_, v| flow_causal_diff(v["q"], v["k"], v["v"], &cfg).0.sum_all(),
        &qkv(43, 5, 5, 4),
        FD_STEP,
    )
    .map_err(|e| e.to_string())?;
    if !report.passes(1e-4) {
        return Err(format!("flow_causal gradients rel err {:.3e} exceeds 1e-4", report.max_rel_err));
    }
    Ok(())
}
