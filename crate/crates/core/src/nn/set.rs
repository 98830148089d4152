use serde::{Deserialize, Serialize};

use super::init::ParamKind;
use super::{linear, Activation, Cursor, Mode, NetSpec, ParamSet};
use crate::error::{NcvError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetVariant {
    /// Per-slot MLP, symmetric pooling, MLP head.
    SumPoolMlp,
    /// Stacked multi-head self-attention blocks with layer norm.
    AttentionBlocks,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Sum,
    Mean,
}

/// Whether the encoder emits one vector per set or one per slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `[n × output]`, invariant to slot order.
    Pooled,
    /// `[n × (slots·output)]`, equivariant to slot order.
    PerSlot,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetEncoderSpec {
    pub variant: SetVariant,
    pub slot_width: usize,
    pub hidden: usize,
    /// Attention blocks (ignored by `sum_pool_mlp`).
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub pooling: Pooling,
    pub readout: Readout,
    pub output: usize,
    pub activation: Activation,
}

fn default_blocks() -> usize {
    2
}

fn default_heads() -> usize {
    4
}

impl SetEncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.slot_width == 0 || self.hidden == 0 || self.output == 0 {
            return Err(NcvError::config("set encoder widths must be positive"));
        }
        if self.variant == SetVariant::AttentionBlocks {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return Err(NcvError::config(format!(
                    "hidden width {} not divisible by {} heads",
                    self.hidden, self.heads
                )));
            }
            if self.blocks == 0 {
                return Err(NcvError::config("attention variant needs at least one block"));
            }
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Vec<(String, ParamKind)> {
        let h = self.hidden;
        let w = |name: &str, i: usize, o: usize| {
            [
                (format!("{name}.w"), ParamKind::Weight { fan_in: i, fan_out: o }),
                (format!("{name}.b"), ParamKind::Bias(o)),
            ]
        };
        let ln = |name: &str| {
            [
                (format!("{name}.g"), ParamKind::LnScale(h)),
                (format!("{name}.b"), ParamKind::LnShift(h)),
            ]
        };
        let mut out = Vec::new();
        match self.variant {
            SetVariant::SumPoolMlp => {
                out.extend(w("phi0", self.slot_width, h));
                out.extend(w("phi1", h, h));
                let head_in = match self.readout {
                    Readout::Pooled => h,
                    Readout::PerSlot => 2 * h,
                };
                out.extend(w("rho0", head_in, h));
                out.extend(w("rho1", h, self.output));
            }
            SetVariant::AttentionBlocks => {
                out.extend(w("embed", self.slot_width, h));
                for b in 0..self.blocks {
                    for part in ["q", "k", "v", "o"] {
                        out.extend(w(&format!("blk{b}.{part}"), h, h));
                    }
                    out.extend(ln(&format!("blk{b}.ln0")));
                    out.extend(w(&format!("blk{b}.ff0"), h, h));
                    out.extend(w(&format!("blk{b}.ff1"), h, h));
                    out.extend(ln(&format!("blk{b}.ln1")));
                }
                out.extend(w("rho0", h, h));
                out.extend(w("rho1", h, self.output));
            }
        }
        out
    }

    fn pool(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self.pooling {
            Pooling::Sum => tape.sum_axis1(x),
            Pooling::Mean => tape.mean_axis1(x),
        }
    }

    /// Input `[n × slots × slot_width]`.
    pub(crate) fn forward_tape(
        &self,
        tape: &mut Tape,
        params: &mut Cursor<'_>,
        slots: Var,
    ) -> Result<Var> {
        let sh = tape.shape(slots).to_vec();
        if sh.len() != 3 || sh[2] != self.slot_width {
            return Err(NcvError::Dimension {
                op: "set_forward",
                lhs: sh,
                rhs: vec![self.slot_width],
            });
        }
        let (n, s, h) = (sh[0], sh[1], self.hidden);
        let flat = tape.reshape(slots, &[n * s, self.slot_width])?;
        let act = self.activation;

        // per-slot features [n·s × h]
        let per_slot = match self.variant {
            SetVariant::SumPoolMlp => {
                let x = linear(tape, params, flat)?;
                let x = act.apply(tape, x);
                let x = linear(tape, params, x)?;
                act.apply(tape, x)
            }
            SetVariant::AttentionBlocks => {
                let mut x = linear(tape, params, flat)?;
                for _ in 0..self.blocks {
                    x = self.attention_block(tape, params, x, n, s)?;
                }
                x
            }
        };

        let per_slot3 = tape.reshape(per_slot, &[n, s, h])?;
        let pooled = self.pool(tape, per_slot3)?;
        match self.readout {
            Readout::Pooled => {
                let x = linear(tape, params, pooled)?;
                let x = act.apply(tape, x);
                linear(tape, params, x)
            }
            Readout::PerSlot => {
                let head_in = if self.variant == SetVariant::SumPoolMlp {
                    let ctx = tape.broadcast_axis1(pooled, s)?;
                    let cat = tape.concat_last(per_slot3, ctx)?;
                    tape.reshape(cat, &[n * s, 2 * h])?
                } else {
                    per_slot
                };
                let x = linear(tape, params, head_in)?;
                let x = act.apply(tape, x);
                let x = linear(tape, params, x)?;
                tape.reshape(x, &[n, s * self.output])
            }
        }
    }

    fn attention_block(
        &self,
        tape: &mut Tape,
        params: &mut Cursor<'_>,
        x: Var,
        n: usize,
        s: usize,
    ) -> Result<Var> {
        let h = self.hidden;
        let dh = h / self.heads;
        let proj = |tape: &mut Tape, params: &mut Cursor<'_>| -> Result<Var> {
            let p = linear(tape, params, x)?;
            let p = tape.reshape(p, &[n, s, h])?;
            tape.split_heads(p, self.heads)
        };
        let q = proj(tape, params)?;
        let k = proj(tape, params)?;
        let v = proj(tape, params)?;
        let kt = tape.transpose_last2(k)?;
        let scores = tape.bmm(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_last(scores);
        let ctx = tape.bmm(att, v)?;
        let ctx = tape.merge_heads(ctx, self.heads)?;
        let ctx = tape.reshape(ctx, &[n * s, h])?;
        let o = linear(tape, params, ctx)?;
        let res = tape.add(x, o)?;
        let (g0, b0) = (params.take()?, params.take()?);
        let hn = tape.layer_norm(res, g0, b0)?;
        let f = linear(tape, params, hn)?;
        let f = self.activation.apply(tape, f);
        let f = linear(tape, params, f)?;
        let res = tape.add(hn, f)?;
        let (g1, b1) = (params.take()?, params.take()?);
        tape.layer_norm(res, g1, b1)
    }
}

/// Tape-free set-encoder evaluation on `[n × slots × slot_width]`.
pub fn set_forward(spec: &SetEncoderSpec, params: &ParamSet, slots: &Tensor, mode: Mode) -> Result<Tensor> {
    NetSpec::Set(spec.clone()).eval(params, slots, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_params;

    fn spec(variant: SetVariant, readout: Readout) -> SetEncoderSpec {
        SetEncoderSpec {
            variant,
            slot_width: 5,
            hidden: 8,
            blocks: 2,
            heads: 2,
            pooling: Pooling::Sum,
            readout,
            output: 3,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn identical_slots_swap_is_bitwise_stable() {
        for variant in [SetVariant::SumPoolMlp, SetVariant::AttentionBlocks] {
            let s = spec(variant, Readout::Pooled);
            let p = init_params(&NetSpec::Set(s.clone()), 4);
            let row = [0.1, -0.3, 0.7, 0.0, 1.2];
            let mut data = Vec::new();
            data.extend_from_slice(&row);
            data.extend_from_slice(&[0.5; 5]);
            data.extend_from_slice(&row);
            let x = Tensor::new(vec![1, 3, 5], data.clone()).unwrap();
            // swap slots 0 and 2, which are identical
            let mut swapped = data[10..15].to_vec();
            swapped.extend_from_slice(&data[5..10]);
            swapped.extend_from_slice(&data[0..5]);
            let y = Tensor::new(vec![1, 3, 5], swapped).unwrap();
            let a = set_forward(&s, &p, &x, Mode::INFERENCE).unwrap();
            let b = set_forward(&s, &p, &y, Mode::INFERENCE).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn per_slot_readout_shape() {
        let s = spec(SetVariant::SumPoolMlp, Readout::PerSlot);
        let p = init_params(&NetSpec::Set(s.clone()), 4);
        let x = Tensor::from_fn(&[2, 4, 5], |i| (i as f64 * 0.1).sin());
        let y = set_forward(&s, &p, &x, Mode::INFERENCE).unwrap();
        assert_eq!(y.shape(), &[2, 12]);
    }

    #[test]
    fn heads_must_divide_hidden() {
        let mut s = spec(SetVariant::AttentionBlocks, Readout::Pooled);
        s.heads = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn slot_width_mismatch() {
        let s = spec(SetVariant::SumPoolMlp, Readout::Pooled);
        let p = init_params(&NetSpec::Set(s.clone()), 4);
        let x = Tensor::zeros(&[1, 2, 4]);
        assert!(set_forward(&s, &p, &x, Mode::INFERENCE).is_err());
    }
}
