//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter-set optimizer state.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &[Tensor]) -> Self {
        AdamState {
            hyper,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step_count: 0,
        }
    }

    /// One update over all parameter tensors, in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam_step: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return Err(Error::Shape(format!(
                    "adam_step: param numel {} vs grad len {}",
                    p.numel(),
                    g.len()
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let AdamHyper {
            lr,
            beta1,
            beta2,
            eps,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for i in 0..data.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params[0].data().to_vec();
        let mut state = AdamState::new(AdamHyper::default(), &params);
        state.step(&mut params, &[vec![0.0; 3]]).unwrap();
        assert_eq!(params[0].data(), &before[..]);
        assert_eq!(state.step_count, 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // Step 1 with constant grad g: m_hat = g, v_hat = g^2, so the update
        // is -lr * g / (|g| + eps) = approximately -lr * sign(g).
        let hyper = AdamHyper {
            lr: 0.01,
            ..AdamHyper::default()
        };
        let g = 3.7;
        let mut params = vec![Tensor::scalar(5.0)];
        let mut state = AdamState::new(hyper, &params);
        state.step(&mut params, &[vec![g]]).unwrap();
        let expected = 5.0 - hyper.lr * g / (g + hyper.eps);
        assert!((params[0].value() - expected).abs() < 1e-15);
        assert!((params[0].value() - (5.0 - hyper.lr)).abs() < 1e-5);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::zeros(vec![3])];
        let mut state = AdamState::new(AdamHyper::default(), &params);
        assert!(state.step(&mut params, &[vec![0.0; 2]]).is_err());
        assert!(state.step(&mut params, &[]).is_err());
    }

    #[test]
    fn deterministic_over_100_steps() {
        let run = || {
            let mut params = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
            let mut state = AdamState::new(AdamHyper::default(), &params);
            for i in 0..100 {
                let g = vec![(i as f64 * 0.1).sin(), (i as f64 * 0.3).cos()];
                state.step(&mut params, &[g]).unwrap();
            }
            params[0].data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
