pub mod data;
pub mod error;
pub mod game;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod tensor;

pub use error::{NcvError, Result};
pub use tensor::{Tape, Tensor, Var};
