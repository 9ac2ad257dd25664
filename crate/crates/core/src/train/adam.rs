//! Adam with linear warmup, inverse-sqrt decay, and global-norm clipping.

use std::collections::BTreeMap;

use super::TrainConfig;
use crate::autodiff::Grads;
use crate::error::{FlowError, Result};
use crate::model::TrainingState;
use crate::tensor::{quantize_f32, Dtype, Tensor};

/// Effective learning rate at 1-based `step`: linear ramp to `cfg.lr` over
/// the warmup, then decay as sqrt(warmup/step). The two branches meet at
/// step == warmup.
pub fn learning_rate_at(cfg: &TrainConfig, step: u64) -> f64 {
    assert!(step >= 1, "steps are 1-based");
    let (s, w) = (step as f64, cfg.warmup as f64);
    cfg.lr * (s / w).min((w / s).sqrt())
}

/// One optimizer step in place. `state.step` counts completed steps; this
/// call performs step `state.step + 1` and advances it.
///
/// Parameters absent from `grads` are treated as zero-gradient: their
/// moments decay and a fresh parameter stays put. A non-finite gradient
/// aborts before anything is touched, naming the parameter, so a diverging
/// run never corrupts the in-memory model. Clipping rescales the whole
/// gradient once, before any moment update, exactly when the global norm
/// exceeds `cfg.clip`.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &Grads,
    state: &mut TrainingState,
    cfg: &TrainConfig,
) -> Result<()> {
    let op = "adam_step";
    cfg.validate()?;
    for (name, grad) in grads {
        if !params.contains_key(name) {
            return Err(FlowError::contract(op, format!("gradient for unknown parameter {name}")));
        }
        if grad.data().iter().any(|v| !v.is_finite()) {
            return Err(FlowError::internal(op, format!("non-finite gradient in {name}; aborting the step")));
        }
        if grad.shape() != params[name].shape() {
            return Err(FlowError::dim(
                op,
                format!("gradient for {name} has shape {:?}, parameter is {:?}", grad.shape(), params[name].shape()),
            ));
        }
    }

    let norm = grads.values().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    let clip_scale = if cfg.clip > 0.0 && norm > cfg.clip { cfg.clip / norm } else { 1.0 };

    let step = state.step + 1;
    let lr = learning_rate_at(cfg, step);
    let bias1 = 1.0 - cfg.beta1.powi(step as i32);
    let bias2 = 1.0 - cfg.beta2.powi(step as i32);

    for (name, param) in params.iter_mut() {
        let zero = Tensor::zeros(param.shape().to_vec()).expect("parameter shapes are valid");
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| zero.clone());
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| zero.clone());
        let grad = grads.get(name);
        let quantized = param.dtype() == Dtype::F32;
        for i in 0..param.len() {
            let g = grad.map_or(0.0, |g| g.data()[i]) * clip_scale;
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + cfg.adam_eps);
            let next = param.data()[i] - update;
            param.data_mut()[i] = if quantized { quantize_f32(next) } else { next };
        }
    }
    state.step = step;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fresh_state() -> TrainingState {
        TrainingState { step: 0, first_moment: BTreeMap::new(), second_moment: BTreeMap::new() }
    }

    fn one_param(values: Vec<f64>) -> BTreeMap<String, Tensor> {
        let n = values.len();
        BTreeMap::from([("w".to_string(), Tensor::new(vec![n], values, Dtype::F64).unwrap())])
    }

    #[test]
    fn schedule_ramps_linearly_then_decays_as_inverse_sqrt() {
        let cfg = TrainConfig { lr: 3e-4, warmup: 100, ..Default::default() };
        assert!((learning_rate_at(&cfg, 1) - 3e-6).abs() <= 1e-18);
        assert!((learning_rate_at(&cfg, 50) - 1.5e-4).abs() <= 1e-18);
        assert_eq!(learning_rate_at(&cfg, 100), 3e-4);
        assert!((learning_rate_at(&cfg, 400) - 1.5e-4).abs() <= 1e-18);
        assert!(learning_rate_at(&cfg, 99) < cfg.lr && learning_rate_at(&cfg, 101) < cfg.lr);
    }

    #[test]
    fn zero_gradients_leave_fresh_parameters_in_place_while_moments_decay() {
        let cfg = TrainConfig::default();
        let mut params = one_param(vec![1.0, -2.0, 3.0]);
        let mut state = fresh_state();
        state.first_moment.insert("w".to_string(), Tensor::full(vec![3], 0.5).unwrap());
        state.second_moment.insert("w".to_string(), Tensor::full(vec![3], 0.25).unwrap());

        let before = params["w"].clone();
        adam_step(&mut params, &Grads::new(), &mut state, &cfg).unwrap();

        assert_eq!(state.step, 1);
        assert_eq!(state.first_moment["w"].data(), &[0.45; 3], "m decays by beta1");
        assert_eq!(state.second_moment["w"].data(), &[0.245; 3], "v decays by beta2");
        // The decayed momentum still moves the parameter; only a fresh state
        // stays exactly put.
        assert_ne!(params["w"].data(), before.data());

        let mut fresh_params = one_param(vec![1.0, -2.0, 3.0]);
        adam_step(&mut fresh_params, &Grads::new(), &mut fresh_state(), &cfg).unwrap();
        assert_eq!(fresh_params["w"].data(), before.data());
    }

    #[test]
    fn first_step_matches_the_closed_form() {
        // From zero moments, m-hat == g and v-hat == g*g, so the update is
        // lr_1 * g / (|g| + eps) regardless of the gradient scale.
        let cfg = TrainConfig { clip: 0.0, ..Default::default() };
        let g = [0.3, -4.0, 0.0, 7.5];
        let mut params = one_param(vec![1.0; 4]);
        let grads = Grads::from([("w".to_string(), Tensor::new(vec![4], g.to_vec(), Dtype::F64).unwrap())]);
        let mut state = fresh_state();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();

        let lr1 = learning_rate_at(&cfg, 1);
        for i in 0..4 {
            let expect = 1.0 - lr1 * g[i] / (g[i].abs() + cfg.adam_eps);
            assert!((params["w"].data()[i] - expect).abs() <= 1e-15, "coordinate {i}");
        }
    }

    #[test]
    fn clipping_rescales_the_global_norm_to_the_ceiling() {
        // Gradient (6, 8) has norm 10; with clip 1.0 the applied gradient
        // must have norm 1. Recover it from the first moment: m = 0.1 * g.
        let cfg = TrainConfig { clip: 1.0, ..Default::default() };
        let mut params = one_param(vec![0.0, 0.0]);
        let grads = Grads::from([("w".to_string(), Tensor::new(vec![2], vec![6.0, 8.0], Dtype::F64).unwrap())]);
        let mut state = fresh_state();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();

        let m = state.first_moment["w"].data();
        let applied_norm = (m.iter().map(|v| (v / 0.1) * (v / 0.1)).sum::<f64>()).sqrt();
        assert!((applied_norm - 1.0).abs() <= 1e-12, "applied norm {applied_norm}");

        // A gradient already inside the ceiling passes through untouched.
        let mut state2 = fresh_state();
        let small = Grads::from([("w".to_string(), Tensor::new(vec![2], vec![0.3, 0.4], Dtype::F64).unwrap())]);
        adam_step(&mut one_param(vec![0.0, 0.0]), &small, &mut state2, &cfg).unwrap();
        for (m, g) in state2.first_moment["w"].data().iter().zip([0.3, 0.4]) {
            assert!((m - 0.1 * g).abs() <= 1e-15, "m {m} for unclipped gradient {g}");
        }
    }

    #[test]
    fn a_non_finite_gradient_aborts_naming_the_parameter_and_touching_nothing() {
        let cfg = TrainConfig::default();
        let mut params = one_param(vec![1.0, 2.0]);
        params.insert("bad.bias".to_string(), Tensor::new(vec![1], vec![0.5], Dtype::F64).unwrap());
        let grads = Grads::from([
            ("w".to_string(), Tensor::new(vec![2], vec![0.1, 0.2], Dtype::F64).unwrap()),
            ("bad.bias".to_string(), Tensor::new(vec![1], vec![f64::NAN], Dtype::F64).unwrap()),
        ]);
        let mut state = fresh_state();
        let err = adam_step(&mut params, &grads, &mut state, &cfg).unwrap_err();
        assert!(err.to_string().contains("bad.bias"), "{err}");
        assert_eq!(state.step, 0);
        assert!(state.first_moment.is_empty(), "no moment may be written on abort");
        assert_eq!(params["w"].data(), &[1.0, 2.0]);
    }

    #[test]
    fn mismatched_names_and_shapes_are_rejected() {
        let cfg = TrainConfig::default();
        let mut params = one_param(vec![1.0]);
        let unknown = Grads::from([("nope".to_string(), Tensor::zeros(vec![1]).unwrap())]);
        assert!(adam_step(&mut params, &unknown, &mut fresh_state(), &cfg).is_err());
        let wrong_shape = Grads::from([("w".to_string(), Tensor::zeros(vec![2]).unwrap())]);
        assert!(adam_step(&mut params, &wrong_shape, &mut fresh_state(), &cfg).is_err());
    }

    #[test]
    fn f32_parameters_stay_on_the_f32_grid_after_updates() {
        let cfg = TrainConfig::default();
        let mut params = BTreeMap::from([(
            "w".to_string(),
            Tensor::new(vec![3], vec![1.0, -0.5, 0.25], Dtype::F64).unwrap().to_dtype(Dtype::F32),
        )]);
        let grads = Grads::from([("w".to_string(), Tensor::new(vec![3], vec![0.017, -0.3, 0.09], Dtype::F64).unwrap())]);
        let mut state = fresh_state();
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for &v in params["w"].data() {
            assert_eq!(v, quantize_f32(v), "stored value must be exactly representable in f32");
        }
        // Moments stay full precision even for quantized parameters.
        assert_eq!(state.first_moment["w"].dtype(), Dtype::F64);
    }
}
