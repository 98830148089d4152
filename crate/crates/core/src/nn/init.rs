use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NetSpec, ParamSet};
use crate::tensor::Tensor;

/// Parameter shapes a network declares, in forward order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize, fan_out: usize },
    Bias(usize),
    LnScale(usize),
    LnShift(usize),
}

/// Glorot-uniform weights, zero biases, unit layer-norm scales.
pub fn init_params(spec: &NetSpec, seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    for (name, kind) in spec.layout() {
        let t = match kind {
            ParamKind::Weight { fan_in, fan_out } => {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(&[fan_in, fan_out], |_| rng.gen_range(-limit..limit))
            }
            ParamKind::Bias(n) | ParamKind::LnShift(n) => Tensor::zeros(&[n]),
            ParamKind::LnScale(n) => Tensor::full(&[n], 1.0),
        };
        set.push(name, t);
    }
    set
}
