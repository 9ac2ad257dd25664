//! `train`: run the training loop and report the metrics trail.

use crate::settings::{Globals, TrainSettings};
use crate::Failure;
use flowformer::train;

pub fn run(globals: &Globals, s: &TrainSettings) -> Result<(), Failure> {
    let out = train::train(&s.model, &s.task, &s.run, &globals.out)?;
    for row in &out.metrics {
        println!("step {:>6}  loss {:.6}  metric {:.6}  ({:.1}s)", row.step, row.loss, row.metric, row.seconds);
    }
    eprintln!("wrote {} and {}", out.checkpoint_path.display(), out.metrics_path.display());
    Ok(())
}
