//! `bench`: wallclock scaling of the attention mechanisms.
//!
//! The table (or `--json` report) goes to stdout; bench.csv and bench.json
//! land under `--out`. Timings are the one part of a run `--seed` cannot
//! reproduce; everything else about the report is deterministic.

use crate::settings::{BenchSettings, Globals};
use crate::Failure;
use flowformer::bench::bench_attention;
use std::fs;

pub fn run(globals: &Globals, s: &BenchSettings, json: bool) -> Result<(), Failure> {
    let report = bench_attention(&s.mechanisms, &s.lengths, s.d, s.heads, s.reps, s.backward)?;

    fs::create_dir_all(&globals.out).map_err(flowformer::error::FlowError::from)?;
    let csv_path = globals.out.join("bench.csv");
    fs::write(&csv_path, report.to_csv()).map_err(flowformer::error::FlowError::from)?;
    let json_path = globals.out.join("bench.json");
    let pretty = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&json_path, pretty).map_err(flowformer::error::FlowError::from)?;

    if json {
        println!("{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_table());
    }
    eprintln!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}
