//! Deterministic parameter initialization.
//!
//! Draw order is the [`parameter_shapes`] order, so a seed fully determines
//! the checkpoint. Rules by name: embeddings are uniform at the 0.02 scale,
//! layer-norm gains start at 1 and shifts at 0, every other rank-1 tensor is
//! a zero bias, and rank-2 weights are uniform with scale 1/sqrt(fan_in)
//! where fan_in is the input extent.

use super::{parameter_shapes, Checkpoint, ModelConfig};
use crate::error::Result;
use crate::rng::seeded;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let mut parameters = BTreeMap::new();
    for (name, shape) in parameter_shapes(cfg) {
        let t = if name.starts_with("embed.") {
            Tensor::rand_uniform(&mut rng, shape, -0.02, 0.02)?
        } else if name.ends_with(".gamma") {
            Tensor::ones(shape)?
        } else if shape.len() == 1 {
            // .beta and every bias.
            Tensor::zeros(shape)?
        } else {
            let scale = 1.0 / (shape[0] as f64).sqrt();
            Tensor::rand_uniform(&mut rng, shape, -scale, scale)?
        };
        parameters.insert(name, t);
    }
    Ok(Checkpoint { config: cfg.clone(), parameters, training_state: None })
}

#[cfg(test)]
mod tests {
    use super::super::test_config;
    use super::*;

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let cfg = test_config();
        let a = init_parameters(&cfg, 9).unwrap();
        let b = init_parameters(&cfg, 9).unwrap();
        assert_eq!(a.parameters.len(), b.parameters.len());
        for (name, t) in &a.parameters {
            assert_eq!(t.data(), b.parameters[name].data(), "{name}");
        }
        let c = init_parameters(&cfg, 10).unwrap();
        assert_ne!(a.parameters["embed.tok"].data(), c.parameters["embed.tok"].data());
    }

    #[test]
    fn norm_gains_are_one_and_biases_zero() {
        let ckpt = init_parameters(&test_config(), 1).unwrap();
        assert!(ckpt.parameters["layers.0.ln1.gamma"].data().iter().all(|&x| x == 1.0));
        assert!(ckpt.parameters["layers.0.ln2.beta"].data().iter().all(|&x| x == 0.0));
        assert!(ckpt.parameters["layers.0.attn.bq"].data().iter().all(|&x| x == 0.0));
        assert!(ckpt.parameters["head.b"].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn weight_scales_follow_fan_in() {
        let cfg = test_config();
        let ckpt = init_parameters(&cfg, 2).unwrap();
        let w1 = &ckpt.parameters["layers.0.ffn.w1"]; // fan_in = channels
        let bound = 1.0 / (cfg.channels as f64).sqrt();
        assert!(w1.data().iter().all(|&x| x.abs() < bound));
        assert!(w1.data().iter().any(|&x| x.abs() > bound / 2.0), "draws should fill the range");
        let emb = &ckpt.parameters["embed.tok"];
        assert!(emb.data().iter().all(|&x| x.abs() < 0.02));
    }
}
