//! `eval`: score a saved checkpoint on a task's evaluation batches.
//!
//! The metric prints at full precision (shortest round-trip f64), so two
//! bit-identical evaluations print identical lines.

use crate::settings::EvalSettings;
use crate::Failure;
use flowformer::model::Checkpoint;
use flowformer::train;

pub fn run(s: &EvalSettings) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(&s.checkpoint)?;
    let batches = train::eval_batches(&s.task, &s.run)?;
    let metric = train::evaluate(&ckpt.config, &ckpt.parameters, &batches, &s.task)?;
    println!("task {}  batches {}  metric {metric}", s.task.name(), batches.len());
    Ok(())
}
