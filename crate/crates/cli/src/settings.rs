//! Config-file schema and flag overlay.
//!
//! Precedence, lowest to highest: built-in defaults, the `--config` file,
//! explicit flags. Every subcommand echoes its resolved settings as one
//! JSON line before doing work, and that line parses back as a `--config`
//! file that resolves to itself, so echoes double as experiment records.
//!
//! A config file may carry sections for several subcommands at once; each
//! command reads its own section plus the globals. A `model` section, when
//! present, replaces the task-derived default wholesale rather than merging
//! field by field; per-field tweaks go through flags.

use crate::{AblateArgs, BenchArgs, Cli, EvalArgs, Failure, ModelFlags, RunFlags, TaskFlags, TrainArgs};
use flowformer::attention::{AttentionConfig, Mechanism};
use flowformer::error::FlowError;
use flowformer::model::{HeadType, ModelConfig};
use flowformer::tasks::{load_char_lm, LISTOPS_CLASSES, LISTOPS_VOCAB};
use flowformer::tensor::Dtype;
use flowformer::train::{TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::path::{Path, PathBuf};

/// Top level of a `--config` file. Every key is optional.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub dtype: Option<Dtype>,
    pub out: Option<PathBuf>,
    pub bench: Option<BenchSettings>,
    pub train: Option<TrainSection>,
    pub eval: Option<EvalSection>,
    pub dump_attn: Option<DumpSection>,
    pub ablate: Option<AblateSection>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<ConfigFile, FlowError> {
        let Some(path) = path else { return Ok(ConfigFile::default()) };
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| FlowError::data("config", format!("{}: {e}", path.display())))
    }
}

/// Settings shared by every subcommand, resolved once.
#[derive(Debug, Clone)]
pub struct Globals {
    pub seed: u64,
    pub dtype: Dtype,
    pub out: PathBuf,
}

pub fn resolve_globals(cli: &Cli, file: &ConfigFile) -> Result<Globals, FlowError> {
    let dtype = match &cli.dtype {
        Some(s) => s.parse()?,
        None => file.dtype.unwrap_or(Dtype::F64),
    };
    Ok(Globals {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        dtype,
        out: cli.out.clone().or_else(|| file.out.clone()).unwrap_or_else(|| PathBuf::from("out")),
    })
}

/// The resolved-settings echo: globals plus the subcommand's own section,
/// as one compact JSON line on stdout.
pub fn echo<T: Serialize>(globals: &Globals, section: &str, value: &T) {
    println!("{}", echo_value(globals, Some((section, value))));
}

pub fn echo_globals(globals: &Globals) {
    println!("{}", echo_value::<()>(globals, None));
}

fn echo_value<T: Serialize>(globals: &Globals, section: Option<(&str, &T)>) -> String {
    let mut doc = serde_json::Map::new();
    doc.insert("seed".into(), json!(globals.seed));
    doc.insert("dtype".into(), json!(globals.dtype));
    doc.insert("out".into(), json!(globals.out));
    if let Some((key, value)) = section {
        doc.insert(key.into(), serde_json::to_value(value).expect("settings serialize"));
    }
    serde_json::Value::Object(doc).to_string()
}

// ---- bench ----

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSettings {
    pub mechanisms: Vec<Mechanism>,
    pub lengths: Vec<usize>,
    pub d: usize,
    pub heads: usize,
    pub reps: usize,
    pub backward: bool,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            mechanisms: vec![Mechanism::FlowNormal, Mechanism::FlowCausal, Mechanism::Canonical],
            lengths: vec![512, 1024, 2048, 4096],
            d: 64,
            heads: 4,
            reps: 5,
            backward: false,
        }
    }
}

pub fn resolve_bench(file: Option<BenchSettings>, args: &BenchArgs) -> Result<BenchSettings, FlowError> {
    let mut s = file.unwrap_or_default();
    if !args.mechanisms.is_empty() {
        s.mechanisms = args.mechanisms.iter().map(|m| m.parse()).collect::<Result<_, FlowError>>()?;
    }
    if !args.lengths.is_empty() {
        s.lengths = args.lengths.clone();
    }
    if let Some(d) = args.d {
        s.d = d;
    }
    if let Some(h) = args.heads {
        s.heads = h;
    }
    if let Some(r) = args.reps {
        s.reps = r;
    }
    if args.backward {
        s.backward = true;
    }
    Ok(s)
}

// ---- train ----

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub model: Option<ModelConfig>,
    pub task: Option<TaskSpec>,
    pub run: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub run: TrainConfig,
}

pub fn resolve_train(file: &ConfigFile, args: &TrainArgs, cli: &Cli) -> Result<TrainSettings, Failure> {
    let section = file.train.clone().unwrap_or_default();
    let task = resolve_task(section.task, &args.task)?;
    let mut model = match section.model {
        Some(m) => m,
        None => derived_model(&task)?,
    };
    apply_model_flags(&mut model, &args.model)?;
    if args.tie_lm_head {
        model.tie_lm_head = true;
    }
    let run = resolve_run(section.run, &args.run, cli, file)?;
    Ok(TrainSettings { model, task, run })
}

/// Overlay loop flags and the global seed/dtype on a section's run config.
fn resolve_run(
    section: Option<TrainConfig>,
    flags: &RunFlags,
    cli: &Cli,
    file: &ConfigFile,
) -> Result<TrainConfig, FlowError> {
    let mut run = section.unwrap_or_default();
    if let Some(v) = flags.steps {
        run.steps = v;
    }
    if let Some(v) = flags.batch {
        run.batch = v;
    }
    if let Some(v) = flags.lr {
        run.lr = v;
    }
    if let Some(v) = flags.warmup {
        run.warmup = v;
    }
    if let Some(v) = flags.clip {
        run.clip = v;
    }
    if let Some(v) = flags.eval_interval {
        run.eval_interval = v;
    }
    if let Some(seed) = cli.seed.or(file.seed) {
        run.seed = seed;
    }
    if let Some(s) = &cli.dtype {
        run.dtype = s.parse()?;
    } else if let Some(d) = file.dtype {
        run.dtype = d;
    }
    Ok(run)
}

/// Pick the task kind (flag wins over file, default copy), then overlay the
/// kind's parameter flags. Flags for a different kind are usage errors.
pub fn resolve_task(file_task: Option<TaskSpec>, flags: &TaskFlags) -> Result<TaskSpec, FlowError> {
    let op = "task";
    let mut task = match (&flags.task, file_task) {
        (Some(kind), Some(t)) if kind == t.name() => t,
        (Some(kind), _) => default_task(kind, flags)?,
        (None, Some(t)) => t,
        (None, None) => default_task("copy", flags)?,
    };
    let foreign = |name: &str, set: bool, kind: &str| -> Result<(), FlowError> {
        if set {
            return Err(FlowError::contract(op, format!("--{name} does not apply to {kind}")));
        }
        Ok(())
    };
    match &mut task {
        TaskSpec::Copy { seq_len, vocab } => {
            if let Some(v) = flags.seq_len {
                *seq_len = v;
            }
            if let Some(v) = flags.vocab {
                *vocab = v;
            }
            foreign("max-depth", flags.max_depth.is_some(), "copy")?;
            foreign("max-len", flags.max_len.is_some(), "copy")?;
            foreign("data", flags.data.is_some(), "copy")?;
            foreign("split-fraction", flags.split_fraction.is_some(), "copy")?;
        }
        TaskSpec::Listops { max_depth, max_len } => {
            if let Some(v) = flags.max_depth {
                *max_depth = v;
            }
            if let Some(v) = flags.max_len {
                *max_len = v;
            }
            foreign("seq-len", flags.seq_len.is_some(), "listops")?;
            foreign("vocab", flags.vocab.is_some(), "listops")?;
            foreign("data", flags.data.is_some(), "listops")?;
            foreign("split-fraction", flags.split_fraction.is_some(), "listops")?;
        }
        TaskSpec::CharLm { path, seq_len, split_fraction } => {
            if let Some(v) = &flags.data {
                *path = v.clone();
            }
            if let Some(v) = flags.seq_len {
                *seq_len = v;
            }
            if let Some(v) = flags.split_fraction {
                *split_fraction = v;
            }
            foreign("vocab", flags.vocab.is_some(), "char_lm")?;
            foreign("max-depth", flags.max_depth.is_some(), "char_lm")?;
            foreign("max-len", flags.max_len.is_some(), "char_lm")?;
        }
    }
    Ok(task)
}

fn default_task(kind: &str, flags: &TaskFlags) -> Result<TaskSpec, FlowError> {
    match kind {
        "copy" => Ok(TaskSpec::Copy { seq_len: 17, vocab: 8 }),
        "listops" => Ok(TaskSpec::Listops { max_depth: 3, max_len: 32 }),
        "char_lm" => {
            let path = flags.data.clone().ok_or_else(|| {
                FlowError::contract("task", "char_lm needs a corpus: pass --data <path>")
            })?;
            Ok(TaskSpec::CharLm { path, seq_len: 64, split_fraction: 0.9 })
        }
        other => Err(FlowError::contract("task", format!("unknown task {other:?}, expected copy, listops, or char_lm"))),
    }
}

/// Smallest architecture satisfying the task's contract: the right head,
/// enough vocabulary, enough positions, and a causal mechanism for
/// autoregressive tasks. char_lm reads its corpus to size the vocabulary.
pub fn derived_model(task: &TaskSpec) -> Result<ModelConfig, FlowError> {
    let (vocab_size, max_seq_len, head, mechanism) = match task {
        TaskSpec::Copy { seq_len, vocab } => (*vocab, *seq_len, HeadType::Lm, Mechanism::FlowCausal),
        TaskSpec::Listops { max_len, .. } => (
            LISTOPS_VOCAB,
            *max_len,
            HeadType::Classification { num_classes: LISTOPS_CLASSES },
            Mechanism::FlowNormal,
        ),
        TaskSpec::CharLm { path, seq_len, split_fraction } => {
            let (_, _, vocab) = load_char_lm(path, *seq_len, *split_fraction)?;
            (vocab.size(), seq_len.saturating_sub(1), HeadType::Lm, Mechanism::FlowCausal)
        }
    };
    Ok(ModelConfig {
        vocab_size,
        max_seq_len,
        layers: 2,
        channels: 64,
        heads: 4,
        ffn_channels: None,
        attention: AttentionConfig { mechanism, ..Default::default() },
        head,
        tie_lm_head: false,
        dropout: 0.0,
    })
}

fn apply_model_flags(model: &mut ModelConfig, flags: &ModelFlags) -> Result<(), FlowError> {
    if let Some(s) = &flags.mechanism {
        model.attention.mechanism = s.parse()?;
    }
    if let Some(s) = &flags.phi {
        model.attention.phi = s.parse()?;
    }
    if let Some(v) = flags.layers {
        model.layers = v;
    }
    if let Some(v) = flags.channels {
        model.channels = v;
    }
    if let Some(v) = flags.heads {
        model.heads = v;
    }
    if let Some(v) = flags.ffn {
        model.ffn_channels = Some(v);
    }
    if let Some(v) = flags.dropout {
        model.dropout = v;
    }
    Ok(())
}

// ---- eval ----

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub task: Option<TaskSpec>,
    pub run: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub checkpoint: PathBuf,
    pub task: TaskSpec,
    pub run: TrainConfig,
}

/// Eval falls back to the train section's task and run settings, so the
/// echo a train run printed drives a matching evaluation unchanged.
pub fn resolve_eval(
    file: &ConfigFile,
    args: &EvalArgs,
    cli: &Cli,
    globals: &Globals,
) -> Result<EvalSettings, Failure> {
    let section = file.eval.clone().unwrap_or_default();
    let train_section = file.train.clone().unwrap_or_default();
    let checkpoint = args
        .checkpoint
        .clone()
        .or(section.checkpoint)
        .unwrap_or_else(|| globals.out.join("checkpoint.ckpt"));
    let task = resolve_task(section.task.or(train_section.task), &args.task)?;
    let run_flags = RunFlags { batch: args.batch, ..Default::default() };
    let run = resolve_run(section.run.or(train_section.run), &run_flags, cli, file)?;
    Ok(EvalSettings { checkpoint, task, run })
}

// ---- dump-attn ----

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DumpSection {
    pub checkpoint: Option<PathBuf>,
    pub tokens: Option<Vec<usize>>,
    pub length: Option<usize>,
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub model: Option<ModelConfig>,
}

/// Fully resolved dump request. `tokens` holds the actual ids fed to the
/// model (randomly drawn ones included), so re-running the echo reproduces
/// the dump bit for bit.
#[derive(Debug, Clone, Serialize)]
pub struct DumpSettings {
    pub checkpoint: Option<PathBuf>,
    pub tokens: Vec<usize>,
    pub layer: usize,
    pub head: Option<usize>,
    pub model: ModelConfig,
}

// ---- ablate ----

/// A design dimension the ablation sweep can vary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Phi,
    CompetitionAct,
    AllocationAct,
    NoCompetition,
    NoAllocation,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Phi => "phi",
            Axis::CompetitionAct => "competition_act",
            Axis::AllocationAct => "allocation_act",
            Axis::NoCompetition => "no_competition",
            Axis::NoAllocation => "no_allocation",
        }
    }
}

impl std::str::FromStr for Axis {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self, FlowError> {
        [Axis::Phi, Axis::CompetitionAct, Axis::AllocationAct, Axis::NoCompetition, Axis::NoAllocation]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| FlowError::contract("ablate", format!("unknown axis {s:?}")))
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub axes: Option<Vec<Axis>>,
    pub model: Option<ModelConfig>,
    pub task: Option<TaskSpec>,
    pub run: Option<TrainConfig>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateSettings {
    pub axes: Vec<Axis>,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub run: TrainConfig,
}

pub fn resolve_ablate(file: &ConfigFile, args: &AblateArgs, cli: &Cli) -> Result<AblateSettings, Failure> {
    let section = file.ablate.clone().unwrap_or_default();
    let mut axes = match (&args.axes[..], section.axes) {
        ([], Some(axes)) => axes,
        ([], None) => vec![Axis::CompetitionAct, Axis::AllocationAct],
        (flags, _) => flags.iter().map(|a| a.parse()).collect::<Result<_, FlowError>>()?,
    };
    axes.dedup();
    let task = resolve_task(section.task, &args.task)?;
    let model = match section.model {
        Some(m) => m,
        // Many rows train, so shrink the derived default to a micro model.
        None => ModelConfig { layers: 1, channels: 32, ..derived_model(&task)? },
    };
    let run = resolve_run(section.run, &args.run, cli, file)?;
    Ok(AblateSettings { axes, model, task, run })
}
