//! `dump-attn`: write one layer's competition and allocation weights.
//!
//! Competition is softmax over the conserved outgoing capacities (one
//! distribution per head, over source positions); allocation is the sigmoid
//! of the conserved incoming capacities (one gate per sink position). Both
//! files carry one row per head. Mechanisms that keep no flow quantities
//! (canonical, linear baseline) are rejected as unsupported.

use crate::settings::{ConfigFile, DumpSettings, Globals};
use crate::{DumpArgs, Failure};
use flowformer::error::FlowError;
use flowformer::model::{forward, init_parameters, Checkpoint};
use flowformer::rng::{seeded, uniform};
use flowformer::tensor::Tensor;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

/// Resolve the section and flags into a concrete dump request plus the
/// parameters to run it with (loaded or freshly initialized).
pub fn resolve(
    file: &ConfigFile,
    args: &DumpArgs,
    globals: &Globals,
) -> Result<(DumpSettings, BTreeMap<String, Tensor>), Failure> {
    let op = "dump_attn";
    let section = file.dump_attn.clone().unwrap_or_default();
    let checkpoint = args.checkpoint.clone().or(section.checkpoint);

    let (model, params) = match &checkpoint {
        Some(path) => {
            if args.mechanism.is_some() {
                return Err(FlowError::contract(
                    op,
                    "--mechanism shapes the random-init model and conflicts with --checkpoint",
                )
                .into());
            }
            let ckpt = Checkpoint::load(path)?;
            (ckpt.config, ckpt.parameters)
        }
        None => {
            let mut model = section.model.clone().unwrap_or_else(default_model);
            if let Some(s) = &args.mechanism {
                model.attention.mechanism = s.parse::<flowformer::attention::Mechanism>()?;
            }
            model.validate()?;
            let ckpt = init_parameters(&model, globals.seed)?;
            (model, ckpt.parameters)
        }
    };

    let tokens = if !args.tokens.is_empty() {
        args.tokens.clone()
    } else if let Some(tokens) = section.tokens {
        tokens
    } else {
        let len = args.length.or(section.length).unwrap_or(16).min(model.max_seq_len);
        let mut rng = seeded(globals.seed);
        (0..len.max(1))
            .map(|_| (uniform(&mut rng, 0.0, model.vocab_size as f64) as usize).min(model.vocab_size - 1))
            .collect()
    };

    let layer = args.layer.or(section.layer).unwrap_or(0);
    if layer >= model.layers {
        return Err(FlowError::contract(op, format!("layer {layer} out of range; the model has {} layers", model.layers)).into());
    }
    let head = args.head.or(section.head);
    if let Some(h) = head {
        if h >= model.heads {
            return Err(FlowError::contract(op, format!("head {h} out of range; the model has {} heads", model.heads)).into());
        }
    }

    Ok((DumpSettings { checkpoint, tokens, layer, head, model }, params))
}

fn default_model() -> flowformer::model::ModelConfig {
    flowformer::model::ModelConfig {
        vocab_size: 16,
        max_seq_len: 64,
        layers: 2,
        channels: 64,
        heads: 4,
        ffn_channels: None,
        attention: flowformer::attention::AttentionConfig::default(),
        head: flowformer::model::HeadType::Lm,
        tie_lm_head: false,
        dropout: 0.0,
    }
}

pub fn run(globals: &Globals, s: &DumpSettings, params: &BTreeMap<String, Tensor>) -> Result<(), Failure> {
    let causal = s.model.attention.mechanism.is_causal();
    let (_, stats) = forward(&s.model, params, &s.tokens, causal)?;
    let Some(st) = &stats[s.layer] else {
        return Err(FlowError::unsupported(
            "dump_attn",
            format!("{} attention keeps no flow quantities to dump", s.model.attention.mechanism),
        )
        .into());
    };

    let competition = st.conserved_outgoing.softmax_axis(0)?;
    let allocation = st.conserved_incoming.sigmoid();
    let heads: Vec<usize> = match s.head {
        Some(h) => vec![h],
        None => (0..s.model.heads).collect(),
    };

    fs::create_dir_all(&globals.out).map_err(FlowError::from)?;
    let comp_path = globals.out.join("competition.csv");
    fs::write(&comp_path, per_head_csv(&competition, &heads)).map_err(FlowError::from)?;
    let alloc_path = globals.out.join("allocation.csv");
    fs::write(&alloc_path, per_head_csv(&allocation, &heads)).map_err(FlowError::from)?;

    println!(
        "layer {}: {} positions, heads {:?}, mechanism {}",
        s.layer,
        s.tokens.len(),
        heads,
        s.model.attention.mechanism
    );
    eprintln!("wrote {} and {}", comp_path.display(), alloc_path.display());
    Ok(())
}

/// One row per head from a [positions, heads] tensor; full-precision f64
/// so downstream checks can reproduce the values exactly.
fn per_head_csv(weights: &Tensor, heads: &[usize]) -> String {
    let positions = weights.shape()[0];
    let mut out = String::from("head");
    for p in 0..positions {
        let _ = write!(out, ",p{p}");
    }
    out.push('\n');
    for &h in heads {
        let _ = write!(out, "{h}");
        for p in 0..positions {
            let _ = write!(out, ",{}", weights.at(&[p, h]));
        }
        out.push('\n');
    }
    out
}
