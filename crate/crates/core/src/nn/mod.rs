//! Agent networks, parameter storage and the optimizer.

mod adam;
mod bundle;
pub mod checkpoint;
mod init;
mod mlp;
mod network;
mod set;

pub use adam::{AdamConfig, AdamState};
pub use bundle::{Agent, AgentBundle, AgentRole};
pub use init::init_params;
pub use mlp::{mlp_forward, MlpSpec};
pub use network::NetSpec;
pub use set::{set_forward, Pooling, Readout, SetEncoderSpec, SetVariant};

use serde::{Deserialize, Serialize};

use crate::error::{NcvError, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Forward-pass mode. `dropout_seed` only matters when `training` is set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub training: bool,
    pub dropout_seed: u64,
}

impl Mode {
    pub const INFERENCE: Mode = Mode {
        training: false,
        dropout_seed: 0,
    };

    pub fn training(dropout_seed: u64) -> Self {
        Mode {
            training: true,
            dropout_seed,
        }
    }
}

/// Ordered, named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.names.push(name.into());
        self.tensors.push(tensor);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every tensor on the tape; trainable ones request gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Replaces values keeping names; shapes must match.
    pub fn assign(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(NcvError::Dimension {
                op: "assign",
                lhs: vec![self.tensors.len()],
                rhs: vec![values.len()],
            });
        }
        for (old, new) in self.tensors.iter().zip(&values) {
            if old.shape() != new.shape() {
                return Err(NcvError::Dimension {
                    op: "assign",
                    lhs: old.shape().to_vec(),
                    rhs: new.shape().to_vec(),
                });
            }
        }
        self.tensors = values;
        Ok(())
    }
}

/// Hands out bound parameter handles in declaration order.
pub(crate) struct Cursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        Cursor { vars, next: 0 }
    }

    pub(crate) fn take(&mut self) -> Result<Var> {
        let v = self.vars.get(self.next).copied().ok_or_else(|| {
            NcvError::contract(format!("parameter list exhausted after {} entries", self.next))
        })?;
        self.next += 1;
        Ok(v)
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.next != self.vars.len() {
            return Err(NcvError::contract(format!(
                "network consumed {} of {} parameters",
                self.next,
                self.vars.len()
            )));
        }
        Ok(())
    }
}

/// `x·W + b` with parameters taken from the cursor.
pub(crate) fn linear(tape: &mut Tape, params: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let w = params.take()?;
    let b = params.take()?;
    let h = tape.matmul(x, w)?;
    tape.add_bias(h, b)
}

/// Mixes counters into one 64-bit seed (splitmix64 finalizer).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}
