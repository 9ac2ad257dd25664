//! `gradcheck`: analytic gradients against central finite differences.
//!
//! Two tiers with their own tolerances: single primitives are pure f64
//! algebra and must sit at 1e-6; whole mechanisms compose hundreds of ops
//! whose FD truncation and cancellation errors accumulate, so they get
//! 1e-4. The exit is nonzero if any row fails, naming the first offender.

use crate::settings::Globals;
use crate::Failure;
use flowformer::attention::AttentionConfig;
use flowformer::autodiff::{
    canonical_diff, finite_diff_check, flow_causal_diff, flow_normal_diff, linear_baseline_diff,
    primitive_gradcheck, FD_STEP,
};
use flowformer::rng::seeded;
use flowformer::tensor::Tensor;
use std::collections::BTreeMap;

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;

pub fn run(globals: &Globals) -> Result<(), Failure> {
    let mut first_fail: Option<String> = None;
    let mut row = |label: &str, err: f64, tol: f64| {
        let ok = err <= tol;
        println!("{label:<22} {err:>12.3e}  (tol {tol:.0e})  {}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            first_fail.get_or_insert_with(|| format!("{label} at {err:.3e} exceeds {tol:.0e}"));
        }
    };

    for (label, err) in primitive_gradcheck(globals.seed)? {
        row(label, err, PRIMITIVE_TOL);
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
    let s = globals.seed;

    let report = finite_diff_check(
        |_, v| flow_normal_diff(v["q"], v["k"], v["v"], &cfg).0.sum_all(),
        &qkv(s ^ 1, 6, 5, 4),
        FD_STEP,
    )?;
    row("flow_normal", report.max_rel_err, COMPOSED_TOL);

    let report = finite_diff_check(
        |_, v| flow_causal_diff(v["q"], v["k"], v["v"], &cfg).0.sum_all(),
        &qkv(s ^ 2, 6, 6, 4),
        FD_STEP,
    )?;
    row("flow_causal", report.max_rel_err, COMPOSED_TOL);

    let report = finite_diff_check(
        |_, v| canonical_diff(v["q"], v["k"], v["v"], 2, false).sum_all(),
        &qkv(s ^ 3, 5, 4, 4),
        FD_STEP,
    )?;
    row("canonical", report.max_rel_err, COMPOSED_TOL);

    let report = finite_diff_check(
        |_, v| linear_baseline_diff(v["q"], v["k"], v["v"], 2).sum_all(),
        &qkv(s ^ 4, 5, 4, 4),
        FD_STEP,
    )?;
    row("linear_baseline", report.max_rel_err, COMPOSED_TOL);

    match first_fail {
        None => {
            println!("all gradients match finite differences");
            Ok(())
        }
        Some(msg) => Err(Failure::Property(format!("gradcheck: {msg}"))),
    }
}
