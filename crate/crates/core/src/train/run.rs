//! The training loop: deterministic batches in, metrics and checkpoints out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adam_step, cross_entropy, derive_seed, TrainConfig};
use crate::attention::Mechanism;
use crate::autodiff::{Grads, Tape, Var};
use crate::error::{FlowError, Result};
use crate::model::{forward, forward_diff, init_parameters, Checkpoint, HeadType, ModelConfig, TrainingState};
use crate::rng::seeded;
use crate::tasks::{gen_copy_task, gen_listops_mini, load_char_lm, CharLmStream, TaskBatch, LISTOPS_CLASSES};
use crate::tensor::{Dtype, Tensor};

/// Batches held out for every evaluation pass.
pub const EVAL_BATCHES: usize = 4;

const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

/// Which task feeds the loop. Synthetic tasks draw a fresh batch per step
/// from (seed, step); the text task cycles windows of a file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskSpec {
    Copy {
        seq_len: usize,
        vocab: usize,
    },
    Listops {
        max_depth: usize,
        max_len: usize,
    },
    CharLm {
        path: PathBuf,
        seq_len: usize,
        #[serde(default = "default_split")]
        split_fraction: f64,
    },
}

fn default_split() -> f64 {
    0.9
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::Listops { .. } => "listops",
            TaskSpec::CharLm { .. } => "char_lm",
        }
    }
}

/// One line of the metrics log. `metric` is the task's evaluation measure:
/// masked accuracy for copy, class accuracy for listops, mean eval loss for
/// the character model. `seconds` is wall clock since training began and is
/// the one column runs with equal seeds will not reproduce.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub metric: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

enum Runner {
    Copy { seq_len: usize, vocab: usize },
    Listops { max_depth: usize, max_len: usize },
    CharLm { train: CharLmStream, eval: CharLmStream },
}

impl Runner {
    /// Builds the runner and reports the smallest vocabulary the model must
    /// embed. Loads and splits the corpus for the text task.
    fn new(task: &TaskSpec) -> Result<(Runner, usize)> {
        Ok(match task {
            TaskSpec::Copy { seq_len, vocab } => (Runner::Copy { seq_len: *seq_len, vocab: *vocab }, *vocab),
            TaskSpec::Listops { max_depth, max_len } => {
                (Runner::Listops { max_depth: *max_depth, max_len: *max_len }, crate::tasks::LISTOPS_VOCAB)
            }
            TaskSpec::CharLm { path, seq_len, split_fraction } => {
                let (train, eval, vocab) = load_char_lm(path, *seq_len, *split_fraction)?;
                (Runner::CharLm { train, eval }, vocab.size())
            }
        })
    }

    fn train_batch(&mut self, cfg: &TrainConfig, step: u64) -> Result<TaskBatch> {
        let seed = derive_seed(cfg.seed, TRAIN_STREAM, step);
        match self {
            Runner::Copy { seq_len, vocab } => gen_copy_task(seed, cfg.batch, *seq_len, *vocab),
            Runner::Listops { max_depth, max_len } => gen_listops_mini(seed, cfg.batch, *max_depth, *max_len),
            Runner::CharLm { train, .. } => train.batch_cycled(cfg.batch),
        }
    }

    /// The fixed held-out set: seeded batches for synthetic tasks, the start
    /// of the eval region for text (wrapping if the region is short).
    fn eval_batches(&self, cfg: &TrainConfig) -> Result<Vec<TaskBatch>> {
        if let Runner::CharLm { eval, .. } = self {
            let mut stream = eval.clone();
            return (0..EVAL_BATCHES).map(|_| stream.batch_cycled(cfg.batch)).collect();
        }
        (0..EVAL_BATCHES as u64)
            .map(|k| {
                let seed = derive_seed(cfg.seed, EVAL_STREAM, k);
                match self {
                    Runner::Copy { seq_len, vocab } => gen_copy_task(seed, cfg.batch, *seq_len, *vocab),
                    Runner::Listops { max_depth, max_len } => gen_listops_mini(seed, cfg.batch, *max_depth, *max_len),
                    Runner::CharLm { .. } => unreachable!("handled above"),
                }
            })
            .collect()
    }
}

fn check_compat(model: &ModelConfig, task: &TaskSpec, needed_vocab: usize) -> Result<()> {
    let op = "train";
    match (task, &model.head) {
        (TaskSpec::Copy { .. } | TaskSpec::CharLm { .. }, HeadType::Lm) => {}
        (TaskSpec::Copy { .. } | TaskSpec::CharLm { .. }, HeadType::Classification { .. }) => {
            return Err(FlowError::contract(op, format!("{} predicts per position and needs the lm head", task.name())));
        }
        (TaskSpec::Listops { .. }, HeadType::Classification { num_classes }) if *num_classes == LISTOPS_CLASSES => {}
        (TaskSpec::Listops { .. }, head) => {
            return Err(FlowError::contract(
                op,
                format!("listops needs a classification head with {LISTOPS_CLASSES} classes, got {head:?}"),
            ));
        }
    }
    if model.vocab_size < needed_vocab {
        return Err(FlowError::contract(
            op,
            format!("model vocabulary {} cannot embed {} ids up to {needed_vocab}", model.vocab_size, task.name()),
        ));
    }
    let longest_input = match task {
        TaskSpec::Copy { seq_len, .. } => *seq_len,
        TaskSpec::Listops { max_len, .. } => *max_len,
        TaskSpec::CharLm { seq_len, .. } => seq_len.saturating_sub(1),
    };
    if longest_input > model.max_seq_len {
        return Err(FlowError::contract(
            op,
            format!("{} feeds inputs of up to {longest_input} tokens; max_seq_len is {}", task.name(), model.max_seq_len),
        ));
    }
    let causal_task = matches!(task, TaskSpec::Copy { .. } | TaskSpec::CharLm { .. });
    if causal_task && matches!(model.attention.mechanism, Mechanism::FlowNormal | Mechanism::LinearBaseline) {
        return Err(FlowError::contract(
            op,
            format!(
                "{} runs whole-sequence only; an autoregressive task needs {} or {}",
                model.attention.mechanism,
                Mechanism::FlowCausal,
                Mechanism::Canonical
            ),
        ));
    }
    Ok(())
}

/// Taped loss of one sample: the summed masked NLL plus how many positions
/// it covers, so the batch can divide once at the end. Classification trims
/// the row to its real-token prefix and counts as a single position.
fn sample_loss<'t>(
    tape: &'t Tape,
    cfg: &ModelConfig,
    vars: &BTreeMap<String, Var<'t>>,
    batch: &TaskBatch,
    row: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t>, usize)> {
    if batch.per_position() {
        let tokens = batch.input_row(row);
        let mask = batch.mask_row(row);
        let unmasked = mask.iter().filter(|&&m| m).count();
        let (logits, _) = forward_diff(tape, cfg, vars, &tokens, batch.causal, rng)?;
        Ok((logits.cross_entropy(&batch.target_row(row), &mask), unmasked))
    } else {
        let mask = batch.mask_row(row);
        let real = mask.iter().take_while(|&&m| m).count();
        let tokens = &batch.input_row(row)[..real];
        let (logits, _) = forward_diff(tape, cfg, vars, tokens, batch.causal, rng)?;
        let class_row = logits.reshape(vec![1, cfg.output_dim()]);
        Ok((class_row.cross_entropy(&[batch.target_class(row)], &[true]), 1))
    }
}

/// Mean cross-entropy over the batch's unmasked positions and its gradient.
fn batch_loss_and_grads(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    batch: &TaskBatch,
    dropout_rng: &mut Option<ChaCha8Rng>,
) -> Result<(f64, Grads)> {
    let tape = Tape::new();
    let vars: BTreeMap<String, Var> =
        params.iter().map(|(name, value)| (name.clone(), tape.input(name, value.clone()))).collect();
    let mut total: Option<Var> = None;
    let mut count = 0usize;
    for row in 0..batch.batch_size() {
        let (ce, positions) = sample_loss(&tape, cfg, &vars, batch, row, dropout_rng.as_mut())?;
        count += positions;
        total = Some(match total {
            Some(sum) => sum.add(ce),
            None => ce,
        });
    }
    if count == 0 {
        return Err(FlowError::contract("train_step", "the batch masks out every position".to_string()));
    }
    let loss = total.expect("batch size >= 1").scale(1.0 / count as f64);
    let value = loss.value().item()?;
    let grads = tape.backward(loss)?;
    Ok((value, grads))
}

/// The held-out metric on pre-built batches: masked accuracy for copy,
/// class accuracy for listops, mean cross-entropy for the character model.
pub fn evaluate(
    cfg: &ModelConfig,
    params: &BTreeMap<String, Tensor>,
    batches: &[TaskBatch],
    task: &TaskSpec,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut loss_sum = 0.0;
    let mut loss_rows = 0usize;
    for batch in batches {
        for row in 0..batch.batch_size() {
            if batch.per_position() {
                let tokens = batch.input_row(row);
                let (logits, _) = forward(cfg, params, &tokens, batch.causal)?;
                let mask = batch.mask_row(row);
                let targets = batch.target_row(row);
                match task {
                    TaskSpec::CharLm { .. } => {
                        loss_sum += cross_entropy(&logits, &targets, &mask)?;
                        loss_rows += 1;
                    }
                    _ => {
                        for t in 0..tokens.len() {
                            if mask[t] {
                                total += 1;
                                hits += (argmax(&logits.data()[t * cfg.output_dim()..(t + 1) * cfg.output_dim()])
                                    == targets[t]) as usize;
                            }
                        }
                    }
                }
            } else {
                let mask = batch.mask_row(row);
                let real = mask.iter().take_while(|&&m| m).count();
                let (logits, _) = forward(cfg, params, &batch.input_row(row)[..real], batch.causal)?;
                total += 1;
                hits += (argmax(logits.data()) == batch.target_class(row)) as usize;
            }
        }
    }
    match task {
        TaskSpec::CharLm { .. } => Ok(loss_sum / loss_rows.max(1) as f64),
        _ => Ok(hits as f64 / total.max(1) as f64),
    }
}

/// The fixed evaluation set for a task, independent of any training run.
pub fn eval_batches(task: &TaskSpec, cfg: &TrainConfig) -> Result<Vec<TaskBatch>> {
    let (runner, _) = Runner::new(task)?;
    runner.eval_batches(cfg)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn ensure_finite_loss(loss: f64, step: u64, ckpt_path: &Path) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(FlowError::internal(
        "train",
        format!("loss {loss} at step {step}; the run diverged, last good checkpoint kept at {}", ckpt_path.display()),
    ))
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::from("step,loss,metric,seconds\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.step, r.loss, r.metric, r.seconds);
    }
    fs::write(path, out)?;
    Ok(())
}

/// Trains a freshly initialized model and leaves `checkpoint.ckpt` and
/// `metrics.csv` under `out_dir`.
///
/// The checkpoint is written before step 1 and refreshed at every
/// evaluation, so a diverging run always leaves the most recent good state
/// behind; the partial metrics log is flushed on abort too. Everything
/// except the seconds column is a pure function of the two configs and the
/// task.
pub fn train(model_cfg: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutput> {
    model_cfg.validate()?;
    cfg.validate()?;
    let (mut runner, needed_vocab) = Runner::new(task)?;
    check_compat(model_cfg, task, needed_vocab)?;
    // Generating the eval set first lets bad task parameters surface before
    // anything is written under `out_dir`.
    let eval_set = runner.eval_batches(cfg)?;
    fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("checkpoint.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let mut ckpt = init_parameters(model_cfg, cfg.seed)?;
    if cfg.dtype == Dtype::F32 {
        for t in ckpt.parameters.values_mut() {
            *t = t.to_dtype(Dtype::F32);
        }
    }
    let zero_moments: BTreeMap<String, Tensor> = ckpt
        .parameters
        .iter()
        .map(|(name, t)| (name.clone(), Tensor::zeros(t.shape().to_vec()).expect("parameter shapes are valid")))
        .collect();
    let mut state = TrainingState { step: 0, first_moment: zero_moments.clone(), second_moment: zero_moments };
    ckpt.training_state = Some(state.clone());
    ckpt.save(&ckpt_path)?;

    let mut dropout_rng =
        (model_cfg.dropout > 0.0).then(|| seeded(derive_seed(cfg.seed, DROPOUT_STREAM, 0)));

    let mut metrics = Vec::new();
    let started = Instant::now();
    for step in 1..=cfg.steps as u64 {
        let batch = runner.train_batch(cfg, step)?;
        let (loss, grads) = batch_loss_and_grads(model_cfg, &ckpt.parameters, &batch, &mut dropout_rng)?;
        if let Err(err) = ensure_finite_loss(loss, step, &ckpt_path) {
            write_metrics(&metrics_path, &metrics)?;
            return Err(err);
        }
        adam_step(&mut ckpt.parameters, &grads, &mut state, cfg)?;

        let at_interval = cfg.eval_interval > 0 && step % cfg.eval_interval as u64 == 0;
        if at_interval || step == cfg.steps as u64 {
            let metric = evaluate(model_cfg, &ckpt.parameters, &eval_set, task)?;
            ckpt.training_state = Some(state.clone());
            ckpt.save(&ckpt_path)?;
            metrics.push(MetricsRow { step, loss, metric, seconds: started.elapsed().as_secs_f64() });
        }
    }
    write_metrics(&metrics_path, &metrics)?;
    Ok(TrainOutput { checkpoint: ckpt, metrics, checkpoint_path: ckpt_path, metrics_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;

    fn tiny_lm_config(vocab: usize, max_seq_len: usize, mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab,
            max_seq_len,
            layers: 1,
            channels: 16,
            heads: 2,
            ffn_channels: Some(32),
            attention: AttentionConfig { mechanism, ..Default::default() },
            head: HeadType::Lm,
            tie_lm_head: false,
            dropout: 0.0,
        }
    }

    fn fresh_dir(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("flowformer-train-{name}"));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn equal_seeds_reproduce_metrics_and_checkpoint_bytes() {
        let model = tiny_lm_config(8, 8, Mechanism::FlowCausal);
        let task = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let cfg = TrainConfig { steps: 12, batch: 3, eval_interval: 4, seed: 9, ..Default::default() };
        let (dir_a, dir_b) = (fresh_dir("det-a"), fresh_dir("det-b"));
        let a = train(&model, &task, &cfg, &dir_a).unwrap();
        let b = train(&model, &task, &cfg, &dir_b).unwrap();

        assert_eq!(a.metrics.len(), 3);
        for (ra, rb) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!((ra.step, ra.loss, ra.metric), (rb.step, rb.loss, rb.metric));
            assert!(ra.metric >= 0.0 && ra.metric <= 1.0);
        }
        assert_eq!(fs::read(&a.checkpoint_path).unwrap(), fs::read(&b.checkpoint_path).unwrap());

        // The CSVs agree column for column once wall clock is stripped.
        let strip = |p: &Path| -> Vec<String> {
            fs::read_to_string(p)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect()
        };
        assert_eq!(strip(&a.metrics_path), strip(&b.metrics_path));

        let other = train(&model, &task, &TrainConfig { seed: 10, ..cfg }, &fresh_dir("det-c")).unwrap();
        assert_ne!(a.metrics[0].loss, other.metrics[0].loss, "a different seed must train differently");
    }

    #[test]
    fn first_step_loss_sits_near_log_vocab() {
        let model = tiny_lm_config(8, 8, Mechanism::FlowCausal);
        let task = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let cfg = TrainConfig { steps: 1, eval_interval: 0, seed: 3, ..Default::default() };
        let out = train(&model, &task, &cfg, &fresh_dir("lnv")).unwrap();
        assert_eq!(out.metrics.len(), 1, "eval_interval 0 logs only the final step");
        let expected = (8.0f64).ln();
        assert!(
            (out.metrics[0].loss - expected).abs() <= 0.5,
            "first-batch loss {} should sit within 0.5 of ln(vocab) {expected}",
            out.metrics[0].loss
        );
    }

    #[test]
    fn checkpoint_round_trip_reproduces_evaluation_bit_for_bit() {
        let model = tiny_lm_config(8, 8, Mechanism::FlowCausal);
        let task = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let cfg = TrainConfig { steps: 6, eval_interval: 3, seed: 17, ..Default::default() };
        let out = train(&model, &task, &cfg, &fresh_dir("round")).unwrap();

        let loaded = Checkpoint::load(&out.checkpoint_path).unwrap();
        assert_eq!(loaded.parameters, out.checkpoint.parameters);
        assert_eq!(loaded.training_state.as_ref().unwrap().step, 6);

        let batches = eval_batches(&task, &cfg).unwrap();
        let live = evaluate(&model, &out.checkpoint.parameters, &batches, &task).unwrap();
        let reloaded = evaluate(&loaded.config, &loaded.parameters, &batches, &task).unwrap();
        assert_eq!(live.to_bits(), reloaded.to_bits());
        assert_eq!(live, out.metrics.last().unwrap().metric);
    }

    #[test]
    fn a_short_copy_run_reduces_the_loss() {
        let model = tiny_lm_config(6, 8, Mechanism::FlowCausal);
        let task = TaskSpec::Copy { seq_len: 5, vocab: 6 };
        let cfg =
            TrainConfig { steps: 150, batch: 4, lr: 3e-3, warmup: 20, eval_interval: 25, seed: 5, ..Default::default() };
        let out = train(&model, &task, &cfg, &fresh_dir("learn")).unwrap();
        let first = out.metrics.first().unwrap().loss;
        let last = out.metrics.last().unwrap().loss;
        assert!(last < first * 0.5, "loss {first} -> {last} should at least halve");
    }

    #[test]
    fn listops_uses_the_classification_path_end_to_end() {
        let model = ModelConfig {
            head: HeadType::Classification { num_classes: 10 },
            ..tiny_lm_config(16, 24, Mechanism::FlowNormal)
        };
        let task = TaskSpec::Listops { max_depth: 2, max_len: 16 };
        let cfg = TrainConfig { steps: 10, batch: 4, eval_interval: 5, seed: 2, ..Default::default() };
        let out = train(&model, &task, &cfg, &fresh_dir("listops")).unwrap();
        for row in &out.metrics {
            assert!(row.loss.is_finite());
            assert!((0.0..=1.0).contains(&row.metric));
        }
    }

    #[test]
    fn a_one_character_corpus_is_solved_within_two_hundred_steps() {
        let dir = fresh_dir("char");
        fs::create_dir_all(&dir).unwrap();
        let corpus = dir.join("corpus.txt");
        fs::write(&corpus, "a".repeat(800)).unwrap();

        let model = tiny_lm_config(1, 8, Mechanism::FlowCausal);
        let task = TaskSpec::CharLm { path: corpus, seq_len: 8, split_fraction: 0.8 };
        let cfg = TrainConfig { steps: 200, batch: 2, eval_interval: 100, seed: 1, ..Default::default() };
        let out = train(&model, &task, &cfg, &dir).unwrap();
        let last = out.metrics.last().unwrap();
        assert!(last.loss < 0.01, "train loss {} should collapse on a one-symbol alphabet", last.loss);
        assert!(last.metric < 0.01, "eval loss {} should collapse too", last.metric);
    }

    #[test]
    fn incompatible_task_and_model_pairings_fail_before_any_work() {
        let cfg = TrainConfig::default();
        let copy = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let dir = fresh_dir("compat");

        let classifier = ModelConfig {
            head: HeadType::Classification { num_classes: 10 },
            ..tiny_lm_config(8, 8, Mechanism::FlowCausal)
        };
        assert!(train(&classifier, &copy, &cfg, &dir).unwrap_err().to_string().contains("lm head"));

        let listops_on_lm = tiny_lm_config(16, 24, Mechanism::FlowNormal);
        let err = train(&listops_on_lm, &TaskSpec::Listops { max_depth: 2, max_len: 16 }, &cfg, &dir).unwrap_err();
        assert!(err.to_string().contains("classification head"), "{err}");

        let whole_sequence = tiny_lm_config(8, 8, Mechanism::FlowNormal);
        let err = train(&whole_sequence, &copy, &cfg, &dir).unwrap_err();
        assert!(err.to_string().contains("flow_causal"), "{err}");

        let narrow = tiny_lm_config(4, 8, Mechanism::FlowCausal);
        assert!(train(&narrow, &copy, &cfg, &dir).unwrap_err().to_string().contains("vocabulary"));

        let short = tiny_lm_config(8, 4, Mechanism::FlowCausal);
        assert!(train(&short, &copy, &cfg, &dir).unwrap_err().to_string().contains("max_seq_len"));
    }

    #[test]
    fn divergence_aborts_with_the_step_and_the_retained_checkpoint() {
        let err = ensure_finite_loss(f64::NAN, 7, Path::new("out/checkpoint.ckpt")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("step 7") && msg.contains("checkpoint.ckpt"), "{msg}");
        assert!(ensure_finite_loss(2.5, 1, Path::new("x")).is_ok());
    }

    #[test]
    fn an_f32_run_stores_f32_parameters() {
        let model = tiny_lm_config(8, 8, Mechanism::FlowCausal);
        let task = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let cfg = TrainConfig { steps: 3, eval_interval: 0, dtype: Dtype::F32, seed: 4, ..Default::default() };
        let out = train(&model, &task, &cfg, &fresh_dir("f32")).unwrap();
        let loaded = Checkpoint::load(&out.checkpoint_path).unwrap();
        for t in loaded.parameters.values() {
            assert_eq!(t.dtype(), Dtype::F32);
        }
        assert!(out.metrics.last().unwrap().loss.is_finite());
    }

    #[test]
    fn dropout_training_stays_finite_and_deterministic() {
        let model = ModelConfig { dropout: 0.2, ..tiny_lm_config(8, 8, Mechanism::FlowCausal) };
        let task = TaskSpec::Copy { seq_len: 7, vocab: 8 };
        let cfg = TrainConfig { steps: 5, eval_interval: 0, seed: 8, ..Default::default() };
        let a = train(&model, &task, &cfg, &fresh_dir("drop-a")).unwrap();
        let b = train(&model, &task, &cfg, &fresh_dir("drop-b")).unwrap();
        assert_eq!(a.metrics.last().unwrap().loss, b.metrics.last().unwrap().loss);
        assert!(a.metrics.last().unwrap().loss.is_finite());
    }
}
