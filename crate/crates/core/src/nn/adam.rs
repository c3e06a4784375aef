//! Adam with bias correction, operating on any [`ParamSet`](super::ParamSet).
//!
//! Moment buffers are keyed by tensor name and the update iterates tensors in
//! the parameter set's declared order, so a training run is bit-reproducible
//! regardless of how the state maps happen to hash.

use super::{ParamSet, Tensor};
use std::collections::HashMap;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    /// Moment buffers as named tensors (shapes borrowed from `params`), for
    /// embedding optimizer state in a checkpoint.
    pub fn export_tensors<P: ParamSet>(&self, params: &P) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for name in params.tensor_names() {
            let shape = params
                .tensor(&name)
                .expect("declared tensor exists")
                .shape
                .clone();
            if let Some(m) = self.m.get(&name) {
                out.push((
                    format!("adam.m.{name}"),
                    Tensor {
                        shape: shape.clone(),
                        data: m.clone(),
                    },
                ));
            }
            if let Some(v) = self.v.get(&name) {
                out.push((
                    format!("adam.v.{name}"),
                    Tensor {
                        shape,
                        data: v.clone(),
                    },
                ));
            }
        }
        out
    }

    /// Rebuilds state from checkpoint tensors produced by
    /// [`export_tensors`].
    pub fn import_tensors(step: u64, tensors: &[(String, Tensor)]) -> AdamState {
        let mut state = AdamState {
            step,
            ..AdamState::default()
        };
        for (name, tensor) in tensors {
            if let Some(rest) = name.strip_prefix("adam.m.") {
                state.m.insert(rest.to_string(), tensor.data.clone());
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                state.v.insert(rest.to_string(), tensor.data.clone());
            }
        }
        state
    }
}

/// One Adam update: `params -= lr * m_hat / (sqrt(v_hat) + eps)` with the
/// usual bias-corrected moments. Gradients must expose the same tensor names
/// as the parameters.
pub fn adam_step<P: ParamSet>(params: &mut P, grads: &P, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);

    for name in params.tensor_names() {
        let g = grads
            .tensor(&name)
            .unwrap_or_else(|| panic!("gradient set missing tensor {name}"));
        let p = params.tensor_mut(&name).expect("declared tensor exists");
        debug_assert_eq!(p.shape, g.shape, "shape mismatch for {name}");
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.numel()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.numel()]);
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p.data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchConfig, Params};
    use crate::rng::substream;

    /// Single-tensor parameter set for arithmetic-level checks.
    struct Scalar(Tensor);

    impl ParamSet for Scalar {
        fn tensor_names(&self) -> Vec<String> {
            vec!["w".to_string()]
        }
        fn tensor(&self, name: &str) -> Option<&Tensor> {
            (name == "w").then_some(&self.0)
        }
        fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
            (name == "w").then_some(&mut self.0)
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // w = 1, g = w^2 = 1, lr = 0.1: bias correction makes the first step
        // exactly lr * g / (|g| + eps), so w' = 1 - 0.1 * 1 / (1 + 1e-8).
        let mut params = Scalar(Tensor {
            shape: vec![1],
            data: vec![1.0],
        });
        let grads = Scalar(Tensor {
            shape: vec![1],
            data: vec![1.0],
        });
        let mut state = AdamState::new();
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        adam_step(&mut params, &grads, &mut state, &cfg);
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((params.0.data[0] - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op_on_fresh_state() {
        let mut params = Scalar(Tensor {
            shape: vec![1],
            data: vec![0.7],
        });
        let grads = Scalar(Tensor {
            shape: vec![1],
            data: vec![0.0],
        });
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert_eq!(params.0.data[0], 0.7);
    }

    #[test]
    fn updates_are_bitwise_reproducible() {
        let cfg = ArchConfig::causal_lm(4, 6, 8, 1, 2);
        let mut rng = substream(70, "adam-repro", &[]);
        let init = Params::init(&cfg, &mut rng);
        let grads = {
            let mut g = init.zeros_like();
            for name in g.tensor_names() {
                let t = g.tensor_mut(&name).unwrap();
                for (i, v) in t.data.iter_mut().enumerate() {
                    *v = ((i % 7) as f64 - 3.0) * 0.01;
                }
            }
            g
        };
        let run = || {
            let mut p = init.clone();
            let mut state = AdamState::new();
            for _ in 0..5 {
                adam_step(&mut p, &grads, &mut state, &AdamConfig::with_lr(1e-2));
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(a.w_out, b.w_out);
        assert_eq!(a.blocks[0].w_fc1, b.blocks[0].w_fc1);
    }

    #[test]
    fn moment_export_import_roundtrip() {
        let cfg = ArchConfig::causal_lm(4, 6, 8, 1, 2);
        let mut rng = substream(71, "adam-export", &[]);
        let mut params = Params::init(&cfg, &mut rng);
        let (_, grads) = crate::nn::lm_batch_grads(&params, &cfg, &[&[0, 1, 2, 3]]);
        let mut state = AdamState::new();
        adam_step(&mut params, &grads, &mut state, &AdamConfig::default());

        let exported = state.export_tensors(&params);
        let restored = AdamState::import_tensors(state.step, &exported);

        // Continuing from restored state reproduces continuing from live state.
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        let mut s1 = state;
        let mut s2 = restored;
        adam_step(&mut p1, &grads, &mut s1, &AdamConfig::default());
        adam_step(&mut p2, &grads, &mut s2, &AdamConfig::default());
        assert_eq!(p1.w_out, p2.w_out);
        assert_eq!(p1.tok_emb, p2.tok_emb);
    }
}
