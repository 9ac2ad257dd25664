//! Single-binary front end: benchmarks, gradient checks, training, and the
//! diagnostic dumps, all sharing one settings-resolution path.
//!
//! Control flow for every subcommand: parse flags, read the optional
//! `--config` JSON, overlay explicit flags on top of it, print the resolved
//! settings as one JSON line (that line parses back as a `--config` file),
//! then execute. Data meant for pipelines goes to stdout; progress notes and
//! file-path notices go to stderr.
//!
//! Exit codes: 0 success, 1 property failure (a tolerance or invariant
//! violated at runtime), 2 usage error (bad flags or settings), 3 data error
//! (unreadable files, malformed JSON). clap's own flag rejections also
//! exit 2.

pub mod cmd;
pub mod settings;

use clap::{Args, Parser, Subcommand};
use flowformer::error::FlowError;
use std::path::PathBuf;

#[derive(Parser, Debug)]
#[command(name = "flowformer", version, about = "Flow-attention models: benchmarks, training, diagnostics")]
pub struct Cli {
    /// Base RNG seed; overrides any seed in --config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Numeric width for parameters and updates: f64 or f32.
    #[arg(long, global = true, value_name = "DTYPE")]
    pub dtype: Option<String>,

    /// JSON settings file; explicit flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Directory for file outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Time attention mechanisms across sequence lengths and fit scaling
    /// exponents. Writes bench.csv (mechanism,length,median_seconds,
    /// median_steps_per_sec,iqr_steps_per_sec,alloc_bytes) and bench.json
    /// under --out.
    Bench(BenchArgs),

    /// Check analytic gradients against central finite differences, one row
    /// per primitive plus one per differentiable attention mechanism.
    Gradcheck,

    /// Train a model on a task; writes checkpoint.ckpt and metrics.csv
    /// (step,loss,metric,seconds) under --out.
    Train(TrainArgs),

    /// Evaluate a saved checkpoint on a task's evaluation batches.
    Eval(EvalArgs),

    /// Write one layer's competition and allocation weights. competition.csv
    /// and allocation.csv each carry one row per head: head,p0,p1,...
    DumpAttn(DumpArgs),

    /// Train one micro-model per design variant and tabulate the results.
    /// Writes ablate.csv (phi,competition,allocation,default,final_loss,
    /// metric) under --out.
    Ablate(AblateArgs),

    /// Run the built-in invariant suites at fixed seeds; exits nonzero on
    /// the first violated property.
    Selftest,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated mechanisms: flow_normal, flow_causal, canonical,
    /// linear_baseline, flow_oracle.
    #[arg(long, value_delimiter = ',')]
    pub mechanisms: Vec<String>,

    /// Comma-separated sequence lengths, strictly increasing.
    #[arg(long, value_delimiter = ',')]
    pub lengths: Vec<usize>,

    /// Model width (split across heads).
    #[arg(long)]
    pub d: Option<usize>,

    #[arg(long)]
    pub heads: Option<usize>,

    /// Timed repetitions per cell; the median is reported.
    #[arg(long)]
    pub reps: Option<usize>,

    /// Time forward+backward instead of forward only. Absent keeps the
    /// config value.
    #[arg(long)]
    pub backward: bool,

    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

/// Task selection shared by train, eval, and ablate. Flags that belong to a
/// different task kind than the resolved one are rejected.
#[derive(Args, Debug, Default)]
pub struct TaskFlags {
    /// Task kind: copy, listops, or char_lm.
    #[arg(long)]
    pub task: Option<String>,

    /// copy / char_lm window length.
    #[arg(long)]
    pub seq_len: Option<usize>,

    /// copy vocabulary size.
    #[arg(long)]
    pub vocab: Option<usize>,

    /// listops nesting depth.
    #[arg(long)]
    pub max_depth: Option<usize>,

    /// listops token budget per expression.
    #[arg(long)]
    pub max_len: Option<usize>,

    /// char_lm corpus file.
    #[arg(long, value_name = "PATH")]
    pub data: Option<PathBuf>,

    /// char_lm train fraction; the rest is held out.
    #[arg(long)]
    pub split_fraction: Option<f64>,
}

/// Optimizer and loop settings shared by train and ablate.
#[derive(Args, Debug, Default)]
pub struct RunFlags {
    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub batch: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub warmup: Option<usize>,

    /// Gradient-norm ceiling; 0 disables clipping.
    #[arg(long)]
    pub clip: Option<f64>,

    /// Steps between evaluations; 0 evaluates only at the end.
    #[arg(long)]
    pub eval_interval: Option<usize>,
}

/// Architecture overrides for train.
#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    /// Attention mechanism for the model's blocks.
    #[arg(long)]
    pub mechanism: Option<String>,

    /// Feature map: sigmoid, elu_plus_one, or relu.
    #[arg(long)]
    pub phi: Option<String>,

    #[arg(long)]
    pub layers: Option<usize>,

    #[arg(long)]
    pub channels: Option<usize>,

    #[arg(long)]
    pub heads: Option<usize>,

    /// FFN hidden width; default is 4x channels.
    #[arg(long)]
    pub ffn: Option<usize>,

    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub task: TaskFlags,

    #[command(flatten)]
    pub run: RunFlags,

    #[command(flatten)]
    pub model: ModelFlags,

    /// Reuse the token embedding as the LM output projection.
    #[arg(long)]
    pub tie_lm_head: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint to load; default <out>/checkpoint.ckpt.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    #[command(flatten)]
    pub task: TaskFlags,

    /// Evaluation batch size.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DumpArgs {
    /// Checkpoint to load; absent dumps a seeded random initialization.
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,

    /// Comma-separated input token ids; absent draws seeded random ids.
    #[arg(long, value_delimiter = ',')]
    pub tokens: Vec<usize>,

    /// Random input length when --tokens is absent.
    #[arg(long)]
    pub length: Option<usize>,

    /// Block to read the flow quantities from.
    #[arg(long)]
    pub layer: Option<usize>,

    /// Restrict the dump to one head; absent writes every head.
    #[arg(long)]
    pub head: Option<usize>,

    /// Mechanism for the random-init model; conflicts with --checkpoint.
    #[arg(long)]
    pub mechanism: Option<String>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated axes to vary: phi, competition_act, allocation_act,
    /// no_competition, no_allocation.
    #[arg(long, value_delimiter = ',')]
    pub axes: Vec<String>,

    #[command(flatten)]
    pub task: TaskFlags,

    #[command(flatten)]
    pub run: RunFlags,
}

/// Why a run ended unsuccessfully; carries the process exit code.
#[derive(Debug)]
pub enum Failure {
    /// A measured quantity violated a stated tolerance or invariant.
    Property(String),
    Flow(FlowError),
}

impl From<FlowError> for Failure {
    fn from(e: FlowError) -> Self {
        Failure::Flow(e)
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Property(msg) => f.write_str(msg),
            Failure::Flow(e) => write!(f, "{e}"),
        }
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Property(_) => 1,
            // Internal errors are runtime breakage, not misuse; file and
            // format problems are data errors; everything else is the user
            // asking for something invalid.
            Failure::Flow(e) => match e {
                FlowError::Data { .. } | FlowError::Io(_) => 3,
                FlowError::Internal { .. } => 1,
                _ => 2,
            },
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let file = settings::ConfigFile::load(cli.config.as_deref())?;
    let globals = settings::resolve_globals(&cli, &file)?;
    match &cli.command {
        Command::Bench(args) => {
            let s = settings::resolve_bench(file.bench.clone(), args)?;
            settings::echo(&globals, "bench", &s);
            cmd::bench::run(&globals, &s, args.json)
        }
        Command::Gradcheck => {
            settings::echo_globals(&globals);
            cmd::gradcheck::run(&globals)
        }
        Command::Train(args) => {
            let s = settings::resolve_train(&file, args, &cli)?;
            let globals = settings::Globals { seed: s.run.seed, dtype: s.run.dtype, ..globals };
            settings::echo(&globals, "train", &s);
            cmd::train::run(&globals, &s)
        }
        Command::Eval(args) => {
            let s = settings::resolve_eval(&file, args, &cli, &globals)?;
            let globals = settings::Globals { seed: s.run.seed, dtype: s.run.dtype, ..globals };
            settings::echo(&globals, "eval", &s);
            cmd::eval::run(&s)
        }
        Command::DumpAttn(args) => {
            let (s, params) = cmd::dump::resolve(&file, args, &globals)?;
            settings::echo(&globals, "dump_attn", &s);
            cmd::dump::run(&globals, &s, &params)
        }
        Command::Ablate(args) => {
            let s = settings::resolve_ablate(&file, args, &cli)?;
            let globals = settings::Globals { seed: s.run.seed, dtype: s.run.dtype, ..globals };
            settings::echo(&globals, "ablate", &s);
            cmd::ablate::run(&globals, &s)
        }
        Command::Selftest => {
            settings::echo_globals(&globals);
            cmd::selftest::run()
        }
    }
}
