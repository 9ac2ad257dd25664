//! End-to-end checks against the compiled binary: exit codes, the echo
//! line, file outputs, and determinism across reruns.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowformer"))
}

/// Fresh per-test output directory under the target tree.
fn outdir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary spawns")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is utf-8")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is utf-8")
}

/// First stdout line: the resolved-configuration echo.
fn echo_line(out: &Output) -> String {
    stdout(out).lines().next().expect("echo line present").to_string()
}

fn read(path: &PathBuf) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

/// Drop the wallclock column so reruns can be compared exactly.
fn metrics_without_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.split(',').take(3).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn no_arguments_is_a_usage_error() {
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn unknown_flags_are_rejected() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["selftest", "--bogus"]).status.code(), Some(2));
}

#[test]
fn selftest_passes_and_names_each_suite() {
    let out = run(&["selftest", "--out", outdir("selftest").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    for suite in ["conservation", "oracle_equivalence", "causality", "gradients"] {
        assert!(text.contains(&format!("PASS {suite}")), "missing suite {suite}: {text}");
    }
    assert!(text.contains("all suites passed"));
}

#[test]
fn a_corrupted_epsilon_fails_the_conservation_suite_by_name() {
    let out = bin()
        .args(["selftest", "--out", outdir("selftest-bad").to_str().unwrap()])
        .env("FLOWFORMER_SELFTEST_EPS", "-0.5")
        .output()
        .expect("binary spawns");
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FAIL conservation"));
    assert!(stderr(&out).contains("conservation"));
}

#[test]
fn gradcheck_reports_every_row_within_tolerance() {
    let out = run(&["gradcheck", "--out", outdir("gradcheck").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("all gradients match finite differences"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn bench_writes_csv_and_json_and_its_echo_is_reusable() {
    let dir = outdir("bench");
    let out = run(&[
        "bench",
        "--mechanisms",
        "flow_normal",
        "--lengths",
        "8,16,32",
        "--d",
        "8",
        "--heads",
        "2",
        "--reps",
        "5",
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let csv = read(&dir.join("bench.csv"));
    assert!(csv.starts_with("mechanism,length,median_seconds,median_steps_per_sec,iqr_steps_per_sec,alloc_bytes"));
    assert_eq!(csv.lines().count(), 4, "header plus one row per length");
    // The binary installs the counting allocator, so cells are real counts.
    let first_row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert!(first_row[5].parse::<u64>().unwrap() > 0);
    assert!(read(&dir.join("bench.json")).contains("\"scaling\""));

    // Feeding the echoed configuration back reproduces the same resolution.
    let config = dir.join("echo.json");
    std::fs::write(&config, echo_line(&out)).unwrap();
    let again = run(&["bench", "--config", config.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(echo_line(&again), echo_line(&out));
}

#[test]
fn bench_emits_machine_output_on_request() {
    let dir = outdir("bench-json");
    let out = run(&[
        "bench", "--mechanisms", "flow_normal", "--lengths", "8,16", "--d", "4", "--heads", "1",
        "--reps", "5", "--json", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    // Line 1 echoes the configuration; line 2 is the report as one JSON object.
    let text = stdout(&out);
    let report = text.lines().nth(1).expect("report line");
    assert!(report.starts_with('{') && report.contains("\"points\""));
}

#[test]
fn train_is_deterministic_and_eval_matches_its_final_row() {
    let dir_a = outdir("train-a");
    let dir_b = outdir("train-b");
    let args = |dir: &PathBuf| {
        vec![
            "train".to_string(),
            "--task".into(),
            "copy".into(),
            "--seq-len".into(),
            "9".into(),
            "--vocab".into(),
            "6".into(),
            "--steps".into(),
            "20".into(),
            "--batch".into(),
            "4".into(),
            "--eval-interval".into(),
            "10".into(),
            "--layers".into(),
            "1".into(),
            "--channels".into(),
            "16".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            dir.to_str().unwrap().into(),
        ]
    };
    let out_a = bin().args(args(&dir_a)).output().unwrap();
    let out_b = bin().args(args(&dir_b)).output().unwrap();
    assert_eq!(out_a.status.code(), Some(0), "stderr: {}", stderr(&out_a));
    assert_eq!(out_b.status.code(), Some(0));

    let metrics_a = read(&dir_a.join("metrics.csv"));
    assert_eq!(
        metrics_without_seconds(&metrics_a),
        metrics_without_seconds(&read(&dir_b.join("metrics.csv"))),
        "identical seeds must reproduce the metrics log"
    );
    assert_eq!(
        std::fs::read(dir_a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(dir_b.join("checkpoint.ckpt")).unwrap(),
        "identical seeds must reproduce the checkpoint bytes"
    );

    // Same task, batch, and seed rebuild the same eval set, so the metric
    // printed by eval equals the final row of the training log exactly.
    let ckpt = dir_a.join("checkpoint.ckpt");
    let eval = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--task",
        "copy",
        "--seq-len",
        "9",
        "--vocab",
        "6",
        "--batch",
        "4",
        "--seed",
        "5",
        "--out",
        dir_a.to_str().unwrap(),
    ]);
    assert_eq!(eval.status.code(), Some(0), "stderr: {}", stderr(&eval));
    let final_metric = metrics_a.lines().last().unwrap().split(',').nth(2).unwrap().to_string();
    let eval_text = stdout(&eval);
    let printed = eval_text.lines().nth(1).unwrap().rsplit(' ').next().unwrap();
    assert_eq!(printed, final_metric);
}

#[test]
fn the_train_echo_reproduces_the_run_bit_for_bit() {
    let dir_a = outdir("echo-a");
    let dir_b = outdir("echo-b");
    let out = run(&[
        "train", "--task", "copy", "--seq-len", "7", "--vocab", "5", "--steps", "10", "--batch",
        "2", "--eval-interval", "5", "--layers", "1", "--channels", "16", "--seed", "3", "--out",
        dir_a.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let config = dir_a.join("echo.json");
    std::fs::write(&config, echo_line(&out)).unwrap();
    let again = run(&["train", "--config", config.to_str().unwrap(), "--out", dir_b.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0), "stderr: {}", stderr(&again));
    assert_eq!(
        metrics_without_seconds(&read(&dir_a.join("metrics.csv"))),
        metrics_without_seconds(&read(&dir_b.join("metrics.csv"))),
    );
    assert_eq!(
        std::fs::read(dir_a.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(dir_b.join("checkpoint.ckpt")).unwrap(),
    );
}

#[test]
fn dump_attn_writes_normalized_weights() {
    let dir = outdir("dump");
    let out = run(&["dump-attn", "--length", "6", "--layer", "1", "--head", "0", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));

    let competition = read(&dir.join("competition.csv"));
    let row: Vec<f64> = competition
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(row.len(), 6);
    assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);

    let allocation = read(&dir.join("allocation.csv"));
    for v in allocation.lines().nth(1).unwrap().split(',').skip(1) {
        let v: f64 = v.parse().unwrap();
        assert!(v > 0.0 && v < 1.0, "allocation weight {v} outside (0,1)");
    }
}

#[test]
fn dump_attn_gives_a_single_source_the_whole_weight() {
    let dir = outdir("dump-single");
    let out = run(&["dump-attn", "--tokens", "3", "--layer", "0", "--head", "2", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let competition = read(&dir.join("competition.csv"));
    // One source means the competition weight is exactly 1, not 1 within eps.
    assert_eq!(competition.lines().nth(1).unwrap(), "2,1");
}

#[test]
fn dump_attn_rejects_mechanisms_without_flow_quantities() {
    let dir = outdir("dump-canonical");
    let out = run(&[
        "dump-attn", "--mechanism", "canonical", "--length", "4", "--layer", "0", "--head", "0",
        "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("unsupported"));
}

#[test]
fn dump_attn_range_checks_layer_and_head() {
    let dir = outdir("dump-range");
    let out = run(&["dump-attn", "--length", "4", "--layer", "9", "--head", "0", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["dump-attn", "--length", "4", "--layer", "0", "--head", "9", "--out", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_tabulates_the_grid_and_marks_the_default() {
    let dir = outdir("ablate");
    let out = run(&[
        "ablate", "--axes", "no_competition", "--task", "copy", "--seq-len", "7", "--vocab", "6",
        "--steps", "10", "--batch", "2", "--eval-interval", "10", "--out", dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(stdout(&out).contains("* default design"));

    let csv = read(&dir.join("ablate.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "one default row plus one disabled row");
    assert_eq!(rows.iter().filter(|r| r.split(',').nth(3) == Some("true")).count(), 1);
    for row in rows {
        let loss: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(loss.is_finite());
    }
}

#[test]
fn flags_override_the_config_file() {
    let dir = outdir("override");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.json");
    std::fs::write(&config, r#"{"seed": 3, "dtype": "f32"}"#).unwrap();
    let out = run(&["gradcheck", "--config", config.to_str().unwrap(), "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let echo = echo_line(&out);
    assert!(echo.contains("\"seed\":7"), "flag seed wins: {echo}");
    assert!(echo.contains("\"dtype\":\"f32\""), "file dtype survives: {echo}");
}

#[test]
fn a_malformed_config_file_is_a_data_error() {
    let dir = outdir("badconfig");
    std::fs::create_dir_all(&dir).unwrap();
    let config = dir.join("config.json");
    std::fs::write(&config, "{not json").unwrap();
    let out = run(&["selftest", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn char_lm_exit_codes_distinguish_usage_from_missing_data() {
    // No corpus flag at all: a usage error.
    let out = run(&["train", "--task", "char_lm", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(2));
    // A corpus path that does not exist: a data error.
    let out = run(&["train", "--task", "char_lm", "--data", "/definitely/not/here.txt", "--steps", "1"]);
    assert_eq!(out.status.code(), Some(3));
}
