use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{NcvError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled: applied to the weights directly, not through the gradient.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        AdamState {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(NcvError::Dimension {
                op: "adam_step",
                lhs: vec![params.len()],
                rhs: vec![grads.len()],
            });
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(NcvError::Dimension {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("w", Tensor::scalar(w));
        p
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = single(0.7);
        let mut s = AdamState::new(AdamConfig::new(1e-3, 0.0), &p);
        s.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grads_with_decay_scale_weights() {
        let mut p = single(2.0);
        let (lr, wd) = (1e-2, 0.1);
        let mut s = AdamState::new(AdamConfig::new(lr, wd), &p);
        s.step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.tensors()[0].item(), 2.0 * (1.0 - lr * wd));
    }

    #[test]
    fn five_step_scalar_trajectory() {
        // Reference computed by a hand-rolled scalar loop with the textbook
        // update, written independently of `AdamState`.
        let grads = [0.5, -1.0, 0.25, 2.0, -0.75];
        let (lr, b1, b2, eps, wd) = (0.1, 0.9, 0.999, 1e-8, 0.01);
        let mut w_ref = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in grads.iter().enumerate() {
            let t = (t + 1) as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powf(t));
            let vh = v / (1.0 - b2.powf(t));
            w_ref -= lr * wd * w_ref;
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let mut p = single(1.0);
        let mut s = AdamState::new(AdamConfig::new(lr, wd), &p);
        for g in grads {
            s.step(&mut p, &[Tensor::scalar(g)]).unwrap();
        }
        assert!((p.tensors()[0].item() - w_ref).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = single(1.0);
        let mut s = AdamState::new(AdamConfig::new(0.1, 0.0), &p);
        assert!(s.step(&mut p, &[Tensor::zeros(&[2])]).is_err());
    }
}
