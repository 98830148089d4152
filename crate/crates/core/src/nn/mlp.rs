use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::ParamKind;
use super::{linear, mix_seed, Activation, Cursor, Mode, NetSpec, ParamSet};
use crate::error::{NcvError, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Fully connected network: `input → hidden… → output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub activation: Activation,
    /// Dropout rate after each hidden activation, training mode only.
    #[serde(default)]
    pub dropout: f64,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(NcvError::config("mlp needs at least one hidden layer"));
        }
        if self.input == 0 || self.output == 0 || self.hidden.contains(&0) {
            return Err(NcvError::config("mlp widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NcvError::config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }

    pub(crate) fn layout(&self, prefix: &str) -> Vec<(String, ParamKind)> {
        let w = self.widths();
        let mut out = Vec::new();
        for (i, pair) in w.windows(2).enumerate() {
            out.push((
                format!("{prefix}l{i}.w"),
                ParamKind::Weight {
                    fan_in: pair[0],
                    fan_out: pair[1],
                },
            ));
            out.push((format!("{prefix}l{i}.b"), ParamKind::Bias(pair[1])));
        }
        out
    }

    /// Runs the network on `[rows × input]`.
    pub(crate) fn forward_rows(
        &self,
        tape: &mut Tape,
        params: &mut Cursor<'_>,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (_, cols) = tape.value(x).rows_cols();
        if cols != self.input || tape.shape(x).len() != 2 {
            return Err(NcvError::Dimension {
                op: "mlp_forward",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.input],
            });
        }
        let mut h = x;
        let layers = self.hidden.len() + 1;
        for l in 0..layers {
            h = linear(tape, params, h)?;
            if l + 1 < layers {
                h = self.activation.apply(tape, h);
                if mode.training && self.dropout > 0.0 {
                    h = dropout(tape, h, self.dropout, mix_seed(&[mode.dropout_seed, l as u64]))?;
                }
            }
        }
        Ok(h)
    }
}

fn dropout(tape: &mut Tape, h: Var, rate: f64, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - rate);
    let mask = Tensor::from_fn(tape.shape(h), |_| {
        if rng.gen::<f64>() < rate {
            0.0
        } else {
            keep
        }
    });
    let m = tape.constant(mask);
    tape.mul(h, m)
}

/// Tape-free MLP evaluation; flattens a rank-3 slot input.
pub fn mlp_forward(spec: &MlpSpec, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let net = NetSpec::Mlp(spec.clone());
    net.eval(params, x, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn spec(dropout: f64) -> MlpSpec {
        MlpSpec {
            input: 4,
            hidden: vec![8],
            output: 3,
            activation: Activation::Relu,
            dropout,
        }
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let s = spec(0.0);
        let mut p = init_params(&NetSpec::Mlp(s.clone()), 1);
        let zeros: Vec<Tensor> = p.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        p.assign(zeros).unwrap();
        let last = p.len() - 1;
        p.tensors_mut()[last] = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::from_fn(&[2, 4], |i| i as f64);
        let y = mlp_forward(&s, &p, &x, Mode::INFERENCE).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn no_dropout_means_modes_agree() {
        let s = spec(0.0);
        let p = init_params(&NetSpec::Mlp(s.clone()), 2);
        let x = Tensor::from_fn(&[3, 4], |i| (i as f64).sin());
        let a = mlp_forward(&s, &p, &x, Mode::INFERENCE).unwrap();
        let b = mlp_forward(&s, &p, &x, Mode::training(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_is_seeded() {
        let s = spec(0.3);
        let p = init_params(&NetSpec::Mlp(s.clone()), 2);
        let x = Tensor::from_fn(&[16, 4], |i| (i as f64).cos());
        let a = mlp_forward(&s, &p, &x, Mode::training(5)).unwrap();
        let b = mlp_forward(&s, &p, &x, Mode::training(5)).unwrap();
        let c = mlp_forward(&s, &p, &x, Mode::training(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn width_mismatch_is_a_dimension_error() {
        let s = spec(0.0);
        let p = init_params(&NetSpec::Mlp(s.clone()), 2);
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(
            mlp_forward(&s, &p, &x, Mode::INFERENCE),
            Err(NcvError::Dimension { .. })
        ));
    }

    #[test]
    fn validation() {
        let mut s = spec(0.0);
        s.hidden.clear();
        assert!(s.validate().is_err());
        assert!(spec(1.0).validate().is_err());
        assert!(spec(0.3).validate().is_ok());
    }
}
