use serde::{Deserialize, Serialize};

use super::init::ParamKind;
use super::{Cursor, MlpSpec, Mode, ParamSet, SetEncoderSpec};
use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Architecture of one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetSpec {
    Mlp(MlpSpec),
    Set(SetEncoderSpec),
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Mlp(s) => s.validate(),
            NetSpec::Set(s) => s.validate(),
        }
    }

    pub(crate) fn layout(&self) -> Vec<(String, ParamKind)> {
        match self {
            NetSpec::Mlp(s) => s.layout(""),
            NetSpec::Set(s) => s.layout(),
        }
    }

    /// Records the forward pass. Flat networks accept rank-3 slot input by
    /// flattening each sample.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], x: Var, mode: Mode) -> Result<Var> {
        let mut cursor = Cursor::new(params);
        let out = match self {
            NetSpec::Mlp(s) => {
                let x = if tape.shape(x).len() == 2 {
                    x
                } else {
                    let n = tape.shape(x)[0];
                    let f = tape.value(x).len() / n;
                    tape.reshape(x, &[n, f])?
                };
                s.forward_rows(tape, &mut cursor, x, mode)?
            }
            NetSpec::Set(s) => s.forward_tape(tape, &mut cursor, x)?,
        };
        cursor.finish()?;
        Ok(out)
    }

    /// Forward pass without keeping the tape.
    pub fn eval(&self, params: &ParamSet, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, mode)?;
        Ok(tape.value(out).clone())
    }
}
