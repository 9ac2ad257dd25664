//! Gradient verification against central finite differences.
//!
//! The builder closure reconstructs the loss from scratch on whatever tape it
//! is handed, so the checker can evaluate perturbed parameter sets without
//! any caching subtleties: one fresh tape per function evaluation, one more
//! for the analytic gradients.

use super::{Grads, Tape, Var};
use crate::error::{FlowError, Result};
use crate::tensor::{rel_err, Tensor};
use std::collections::BTreeMap;

/// Central-difference step. Large enough that f64 cancellation stays well
/// below the comparison tolerances, small enough for the O(h^2) truncation
/// term to do the same.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error per parameter.
    pub per_param: BTreeMap<String, f64>,
    /// Worst relative error overall.
    pub max_rel_err: f64,
    /// Coordinate behind `max_rel_err`: (param, flat index, analytic, numeric).
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn loss_value<F>(build: &F, params: &BTreeMap<String, Tensor>) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: BTreeMap<String, Var<'_>> =
        params.iter().map(|(name, t)| (name.clone(), tape.input(name, t.clone()))).collect();
    let loss = build(&tape, &vars);
    let value = loss.value();
    if value.len() != 1 {
        return Err(FlowError::contract(
            "finite_diff_check",
            format!("loss must be a scalar, got shape {:?}", value.shape()),
        ));
    }
    Ok(value.data()[0])
}

/// Compare tape gradients of `build(params)` against central differences with
/// step `step`, coordinate by coordinate. Parameters the loss ignores are
/// checked against a zero gradient.
pub fn finite_diff_check<F>(
    build: F,
    params: &BTreeMap<String, Tensor>,
    step: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &BTreeMap<String, Var<'t>>) -> Var<'t>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(FlowError::contract("finite_diff_check", format!("step must be finite and > 0, got {step}")));
    }
    let analytic: Grads = {
        let tape = Tape::new();
        let vars: BTreeMap<String, Var<'_>> =
            params.iter().map(|(name, t)| (name.clone(), tape.input(name, t.clone()))).collect();
        let loss = build(&tape, &vars);
        tape.backward(loss)?
    };

    let mut report = GradCheckReport { per_param: BTreeMap::new(), max_rel_err: 0.0, worst: None };
    let mut scratch = params.clone();
    for (name, base) in params {
        let grad = analytic.get(name);
        let mut worst_here = 0.0;
        for c in 0..base.len() {
            let x = base.data()[c];
            scratch.get_mut(name).unwrap().data_mut()[c] = x + step;
            let up = loss_value(&build, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[c] = x - step;
            let down = loss_value(&build, &scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[c] = x;
            let numeric = (up - down) / (2.0 * step);
            let a = grad.map_or(0.0, |g| g.data()[c]);
            let err = rel_err(a, numeric);
            if err > worst_here {
                worst_here = err;
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), c, a, numeric));
            }
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}

/// One small gradcheck per taped primitive. Returns (label, worst relative
/// error) pairs in a stable order; every entry is expected to sit far below
/// 1e-6 in f64.
pub fn primitive_gradcheck(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use crate::rng::seeded;

    let mut rng = seeded(seed);
    let mut results = Vec::new();

    // Weighted-sum losses give every output coordinate a distinct, nonzero
    // pull, so transposed or misrouted adjoints cannot cancel out.
    macro_rules! check {
        ($label:expr, $params:expr, $build:expr) => {{
            let params: BTreeMap<String, Tensor> = $params;
            let report = finite_diff_check($build, &params, FD_STEP)?;
            results.push(($label, report.max_rel_err));
        }};
    }

    let mut uniform = |shape: &[usize], lo: f64, hi: f64| {
        Tensor::rand_uniform(&mut rng, shape.to_vec(), lo, hi).expect("gradcheck input")
    };
    // Bounded away from zero for kinked or sign-sensitive ops.
    let away = |t: Tensor, margin: f64| {
        let mut t = t;
        for v in t.data_mut() {
            if v.abs() < margin {
                *v = margin * if *v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        t
    };
    let positive = |t: Tensor| {
        let mut t = t;
        for v in t.data_mut() {
            *v = v.abs() + 0.5;
        }
        t
    };
    let one = |name: &str, t: Tensor| BTreeMap::from([(name.to_string(), t)]);
    let two = |a: (&str, Tensor), b: (&str, Tensor)| {
        BTreeMap::from([(a.0.to_string(), a.1), (b.0.to_string(), b.1)])
    };

    fn weighted<'t>(tape: &'t Tape, out: Var<'t>, seed: u64) -> Var<'t> {
        let mut rng = crate::rng::seeded(seed ^ 0x5eed);
        let w = tape.constant(Tensor::rand_uniform(&mut rng, out.shape(), -1.0, 1.0).unwrap());
        out.mul(w).sum_all()
    }

    check!("add", two(("a", uniform(&[2, 3], -1.0, 1.0)), ("b", uniform(&[2, 3], -1.0, 1.0))), |t, v| {
        weighted(t, v["a"].add(v["b"]), 1)
    });
    check!("sub", two(("a", uniform(&[2, 3], -1.0, 1.0)), ("b", uniform(&[2, 3], -1.0, 1.0))), |t, v| {
        weighted(t, v["a"].sub(v["b"]), 2)
    });
    check!("mul", two(("a", uniform(&[2, 3], -1.0, 1.0)), ("b", uniform(&[2, 3], -1.0, 1.0))), |t, v| {
        weighted(t, v["a"].mul(v["b"]), 3)
    });
    check!(
        "mul_prefix",
        two(("a", uniform(&[2, 3, 2], -1.0, 1.0)), ("b", uniform(&[2, 3], -1.0, 1.0))),
        |t, v| weighted(t, v["a"].mul(v["b"]), 4)
    );
    check!("scale", one("a", uniform(&[2, 3], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].scale(-1.7), 5)
    });
    check!("matmul", two(("a", uniform(&[3, 4], -1.0, 1.0)), ("b", uniform(&[4, 2], -1.0, 1.0))), |t, v| {
        weighted(t, v["a"].matmul(v["b"]), 6)
    });
    check!("sigmoid", one("a", uniform(&[2, 3], -2.0, 2.0)), |t, v| {
        weighted(t, v["a"].sigmoid(), 7)
    });
    check!("exp", one("a", uniform(&[2, 3], -2.0, 2.0)), |t, v| weighted(t, v["a"].exp(), 8));
    check!("relu", one("a", away(uniform(&[2, 3], -1.0, 1.0), 0.05)), |t, v| {
        weighted(t, v["a"].relu(), 9)
    });
    check!("elu_plus_one", one("a", away(uniform(&[2, 3], -1.0, 1.0), 0.05)), |t, v| {
        weighted(t, v["a"].elu_plus_one(), 10)
    });
    check!("softmax_axis", one("a", uniform(&[3, 4], -2.0, 2.0)), |t, v| {
        weighted(t, v["a"].softmax_axis(1), 11)
    });
    check!("cumsum_axis", one("a", uniform(&[3, 4], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].cumsum_axis(0), 12)
    });
    check!(
        "stable_div",
        two(("a", uniform(&[3, 4], -1.0, 1.0)), ("b", positive(uniform(&[3, 4], -1.0, 1.0)))),
        |t, v| weighted(t, v["a"].stable_div(v["b"], 1e-6), 13)
    );
    check!(
        "stable_div_prefix",
        two(("a", uniform(&[3, 4], -1.0, 1.0)), ("b", positive(uniform(&[3], -1.0, 1.0)))),
        |t, v| weighted(t, v["a"].stable_div(v["b"], 1e-6), 14)
    );
    check!(
        "layer_norm",
        {
            let mut p = two(("x", uniform(&[3, 4], -1.0, 1.0)), ("gamma", uniform(&[4], 0.5, 1.5)));
            p.insert("beta".to_string(), uniform(&[4], -0.5, 0.5));
            p
        },
        |t, v| weighted(t, v["x"].layer_norm(v["gamma"], v["beta"], 1e-5), 15)
    );
    check!("sum_axis", one("a", uniform(&[3, 4], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].sum_axis(0), 16)
    });
    check!("broadcast_axis", one("a", uniform(&[3, 4], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].broadcast_axis(1, 2), 17)
    });
    check!("transpose_last2", one("a", uniform(&[3, 4], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].transpose_last2(), 18)
    });
    check!("reshape", one("a", uniform(&[3, 4], -1.0, 1.0)), |t, v| {
        weighted(t, v["a"].reshape(vec![2, 6]), 19)
    });
    check!(
        "contract_seq",
        two(("a", uniform(&[4, 2, 3], -1.0, 1.0)), ("b", uniform(&[4, 2, 2], -1.0, 1.0))),
        |t, v| weighted(t, v["a"].contract_seq(v["b"]), 20)
    );
    check!(
        "apply_per_head",
        two(("a", uniform(&[4, 2, 3], -1.0, 1.0)), ("m", uniform(&[2, 3, 2], -1.0, 1.0))),
        |t, v| weighted(t, v["a"].apply_per_head(v["m"]), 21)
    );
    check!(
        "scores_qk",
        two(("q", uniform(&[3, 2, 2], -1.0, 1.0)), ("k", uniform(&[4, 2, 2], -1.0, 1.0))),
        |t, v| weighted(t, v["q"].scores_qk(v["k"]), 22)
    );
    check!(
        "attn_apply_v",
        two(("p", uniform(&[2, 3, 4], -1.0, 1.0)), ("v", uniform(&[4, 2, 3], -1.0, 1.0))),
        |t, v| weighted(t, v["p"].attn_apply_v(v["v"]), 23)
    );
    check!(
        "causal_dot_product",
        {
            let mut p = two(("q", uniform(&[4, 2, 3], -1.0, 1.0)), ("k", uniform(&[4, 2, 3], -1.0, 1.0)));
            p.insert("v".to_string(), uniform(&[4, 2, 2], -1.0, 1.0));
            p
        },
        |t, v| weighted(t, v["q"].causal_dot_product(v["k"], v["v"]), 24)
    );
    check!("causal_competition", one("x", uniform(&[5, 2], -2.0, 2.0)), |t, v| {
        weighted(t, v["x"].causal_competition(), 25)
    });
    check!("gather_rows", one("table", uniform(&[4, 3], -1.0, 1.0)), |t, v| {
        weighted(t, v["table"].gather_rows(&[2, 0, 2, 3]), 26)
    });
    check!("cross_entropy", one("logits", uniform(&[3, 4], -1.0, 1.0)), |_, v| {
        v["logits"].cross_entropy(&[1, 0, 3], &[true, false, true]).scale(0.5)
    });
    check!("sum_all", one("a", uniform(&[3, 2], -1.0, 1.0)), |_, v| v["a"].sum_all());
    check!("sigmoid_of_matmul", two(("a", uniform(&[3, 4], -1.0, 1.0)), ("b", uniform(&[4, 2], -1.0, 1.0))), |t, v| {
        weighted(t, v["a"].matmul(v["b"]).sigmoid(), 27)
    });

    Ok(results)
}
