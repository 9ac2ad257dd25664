//! Throughput measurement across sequence lengths and the scaling-law fit.
//!
//! Medians over repetitions (not means) so a scheduler hiccup cannot drag a
//! point; three warmup iterations are run and discarded before anything is
//! timed. Absolute numbers are hardware-specific and never asserted; the
//! interesting output is the log-log slope, which separates linear
//! mechanisms from quadratic ones on any machine.

mod alloc;

pub use alloc::{allocated_bytes, CountingAllocator};

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;

use crate::attention::{attention_forward, AttentionConfig, Mechanism, DENSE_ORACLE_CAP};
use crate::autodiff::{attention_diff, Tape};
use crate::error::{FlowError, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

/// Iterations run and discarded before timing starts.
pub const WARMUP_STEPS: usize = 3;

/// Dense mechanisms predicted to allocate more than this inside one step
/// are recorded as absent instead of run.
const MEM_BUDGET_BYTES: u64 = 1_500_000_000;

const BENCH_SEED: u64 = 0xBE7C;

/// Measurements for one (mechanism, length) cell.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct PointStats {
    pub median_seconds: f64,
    pub median_steps_per_sec: f64,
    /// Interquartile range of steps/sec across repetitions; a spread
    /// indicator, not an error bar.
    pub iqr_steps_per_sec: f64,
    /// Bytes allocated during one timed step under [`CountingAllocator`];
    /// 0 when the counting allocator is not installed.
    pub alloc_bytes: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchPoint {
    pub mechanism: Mechanism,
    pub length: usize,
    /// `None` records an absent cell: the memory guard refused to
    /// materialize a dense score matrix of this size.
    pub stats: Option<PointStats>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct MechanismScaling {
    pub mechanism: Mechanism,
    /// Slope of ln(time) against ln(length).
    pub exponent: f64,
    /// ln-space intercept of the same fit.
    pub intercept: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub d: usize,
    pub heads: usize,
    pub reps: usize,
    pub with_backward: bool,
    pub lengths: Vec<usize>,
    pub points: Vec<BenchPoint>,
    /// One entry per mechanism with at least three present points.
    pub scaling: Vec<MechanismScaling>,
}

/// Least-squares slope and intercept of ln(time) against ln(length).
/// Needs at least three points; every length and time must be positive.
pub fn fit_scaling(lengths: &[usize], times: &[f64]) -> Result<(f64, f64)> {
    let op = "fit_scaling";
    if lengths.len() != times.len() {
        return Err(FlowError::dim(op, format!("{} lengths but {} times", lengths.len(), times.len())));
    }
    if lengths.len() < 3 {
        return Err(FlowError::contract(op, format!("{} points cannot pin a slope; need at least 3", lengths.len())));
    }
    for (&n, &t) in lengths.iter().zip(times) {
        if n == 0 || !(t > 0.0) {
            return Err(FlowError::contract(op, format!("non-positive point (n {n}, t {t})")));
        }
    }
    let k = lengths.len() as f64;
    let xs: Vec<f64> = lengths.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|&t| t.ln()).collect();
    let (sx, sy) = (xs.iter().sum::<f64>(), ys.iter().sum::<f64>());
    let sxx = xs.iter().map(|x| x * x).sum::<f64>();
    let sxy = xs.iter().zip(&ys).map(|(x, y)| x * y).sum::<f64>();
    let denom = k * sxx - sx * sx;
    if denom.abs() < 1e-12 {
        return Err(FlowError::contract(op, "all lengths coincide; the slope is undefined".to_string()));
    }
    let exponent = (k * sxy - sx * sy) / denom;
    let intercept = (sy - exponent * sx) / k;
    Ok((exponent, intercept))
}

/// Nearest-rank quantile of an ascending slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * p).round() as usize;
    sorted[idx]
}

/// Predicted bytes for the score matrices a dense mechanism materializes;
/// linear mechanisms never trip the guard.
fn dense_bytes(mechanism: Mechanism, n: usize, heads: usize) -> u64 {
    match mechanism {
        Mechanism::Canonical | Mechanism::FlowOracle => 2 * (heads * n * n) as u64 * 8,
        _ => 0,
    }
}

/// One step of the benchmarked workload. Forward-only calls the dispatch;
/// with the backward pass the step tapes its inputs, runs the mechanism,
/// and differentiates a sum loss, the shape of a training step.
fn run_step(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttentionConfig, with_backward: bool) -> Result<()> {
    let causal = cfg.mechanism.is_causal();
    if with_backward {
        let tape = Tape::new();
        let (qv, kv, vv) =
            (tape.input("q", q.clone()), tape.input("k", k.clone()), tape.input("v", v.clone()));
        let (out, _) = attention_diff(qv, kv, vv, cfg, causal)?;
        tape.backward(out.sum_all())?;
    } else {
        attention_forward(q, k, v, cfg, causal)?;
    }
    Ok(())
}

/// Times every mechanism at every length on identical seeded inputs.
///
/// Each cell runs [`WARMUP_STEPS`] discarded iterations, then `reps` timed
/// ones; the report carries the median and interquartile spread. A dense
/// mechanism whose predicted score allocation exceeds the memory guard gets
/// an absent cell rather than an attempt.
pub fn bench_attention(
    mechanisms: &[Mechanism],
    lengths: &[usize],
    d: usize,
    heads: usize,
    reps: usize,
    with_backward: bool,
) -> Result<BenchReport> {
    let op = "bench_attention";
    if mechanisms.is_empty() || lengths.is_empty() {
        return Err(FlowError::contract(op, "need at least one mechanism and one length".to_string()));
    }
    if !lengths.windows(2).all(|w| w[0] < w[1]) {
        return Err(FlowError::contract(op, format!("lengths {lengths:?} must be strictly increasing")));
    }
    if reps < 5 {
        return Err(FlowError::contract(op, format!("{reps} repetitions cannot support a median; need at least 5")));
    }
    if d == 0 || heads == 0 || d % heads != 0 {
        return Err(FlowError::contract(op, format!("d {d} must be a positive multiple of heads {heads}")));
    }
    if mechanisms.contains(&Mechanism::FlowOracle) {
        if let Some(&n) = lengths.iter().find(|&&n| n * n > DENSE_ORACLE_CAP) {
            return Err(FlowError::contract(op, format!("length {n} exceeds the dense oracle cap")));
        }
    }

    let mut points = Vec::with_capacity(mechanisms.len() * lengths.len());
    for &n in lengths {
        let mut rng = seeded(BENCH_SEED ^ n as u64);
        let q = Tensor::rand_uniform(&mut rng, vec![n, d], -1.0, 1.0)?;
        let k = Tensor::rand_uniform(&mut rng, vec![n, d], -1.0, 1.0)?;
        let v = Tensor::rand_uniform(&mut rng, vec![n, d], -1.0, 1.0)?;
        for &mechanism in mechanisms {
            if dense_bytes(mechanism, n, heads) > MEM_BUDGET_BYTES {
                points.push(BenchPoint { mechanism, length: n, stats: None });
                continue;
            }
            let cfg = AttentionConfig { mechanism, heads, ..Default::default() };
            for _ in 0..WARMUP_STEPS {
                run_step(&q, &k, &v, &cfg, with_backward)?;
            }
            let mut seconds = Vec::with_capacity(reps);
            let mut alloc_bytes = 0;
            for rep in 0..reps {
                let alloc_before = allocated_bytes();
                let t0 = Instant::now();
                run_step(&q, &k, &v, &cfg, with_backward)?;
                let elapsed = t0.elapsed().as_secs_f64().max(1e-9);
                if rep == 0 {
                    alloc_bytes = allocated_bytes() - alloc_before;
                }
                seconds.push(elapsed);
            }
            seconds.sort_by(f64::total_cmp);
            let mut rates: Vec<f64> = seconds.iter().map(|t| 1.0 / t).collect();
            rates.sort_by(f64::total_cmp);
            points.push(BenchPoint {
                mechanism,
                length: n,
                stats: Some(PointStats {
                    median_seconds: quantile(&seconds, 0.5),
                    median_steps_per_sec: quantile(&rates, 0.5),
                    iqr_steps_per_sec: quantile(&rates, 0.75) - quantile(&rates, 0.25),
                    alloc_bytes,
                }),
            });
        }
    }

    let mut scaling = Vec::new();
    for &mechanism in mechanisms {
        let (ns, ts): (Vec<usize>, Vec<f64>) = points
            .iter()
            .filter(|p| p.mechanism == mechanism)
            .filter_map(|p| p.stats.map(|s| (p.length, s.median_seconds)))
            .unzip();
        if ns.len() >= 3 {
            let (exponent, intercept) = fit_scaling(&ns, &ts)?;
            scaling.push(MechanismScaling { mechanism, exponent, intercept });
        }
    }

    Ok(BenchReport { d, heads, reps, with_backward, lengths: lengths.to_vec(), points, scaling })
}

impl BenchReport {
    pub fn point(&self, mechanism: Mechanism, length: usize) -> Option<&BenchPoint> {
        self.points.iter().find(|p| p.mechanism == mechanism && p.length == length)
    }

    pub fn exponent(&self, mechanism: Mechanism) -> Option<f64> {
        self.scaling.iter().find(|s| s.mechanism == mechanism).map(|s| s.exponent)
    }

    /// One row per cell; absent cells keep their row with empty measurement
    /// columns.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mechanism,length,median_seconds,median_steps_per_sec,iqr_steps_per_sec,alloc_bytes\n");
        for p in &self.points {
            match &p.stats {
                Some(s) => {
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        p.mechanism, p.length, s.median_seconds, s.median_steps_per_sec, s.iqr_steps_per_sec, s.alloc_bytes
                    );
                }
                None => {
                    let _ = writeln!(out, "{},{},,,,", p.mechanism, p.length);
                }
            }
        }
        out
    }

    /// Steps/sec per mechanism and length, one line per mechanism, absent
    /// cells shown as "-".
    pub fn to_table(&self) -> String {
        let pass = if self.with_backward { "forward+backward" } else { "forward" };
        let mut out = format!("steps/sec ({pass}, d={}, heads={}, median of {} reps)\n", self.d, self.heads, self.reps);
        let _ = write!(out, "{:<16}", "mechanism");
        for &n in &self.lengths {
            let _ = write!(out, "{:>12}", format!("n={n}"));
        }
        out.push_str("    exponent\n");
        let mut seen = Vec::new();
        for p in &self.points {
            if seen.contains(&p.mechanism) {
                continue;
            }
            seen.push(p.mechanism);
            let _ = write!(out, "{:<16}", p.mechanism.to_string());
            for &n in &self.lengths {
                let cell = match self.point(p.mechanism, n).and_then(|p| p.stats.as_ref()) {
                    Some(s) => format!("{:.1}", s.median_steps_per_sec),
                    None => "-".to_string(),
                };
                let _ = write!(out, "{cell:>12}");
            }
            match self.exponent(p.mechanism) {
                Some(e) => {
                    let _ = writeln!(out, "    n^{e:.2}");
                }
                None => out.push('\n'),
            }
        }
        out
    }
}
