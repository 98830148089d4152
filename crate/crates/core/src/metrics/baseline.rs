use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{report_from_decisions, MetricsReport};
use crate::data::Split;
use crate::error::{NcvError, Result};
use crate::game::{argmax, Decision};
use crate::nn::{init_params, mix_seed, Activation, AdamConfig, AdamState, MlpSpec, Mode, NetSpec, ParamSet};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Linear,
    NonlinearMlp,
}

impl BaselineKind {
    pub fn label(self) -> &'static str {
        match self {
            BaselineKind::Linear => "CBM (lin.)",
            BaselineKind::NonlinearMlp => "CBM (nonlin.)",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            epochs: 50,
            batch_size: 64,
            lr: 1e-3,
            weight_decay: 1e-4,
            hidden: 64,
            seed: 0,
        }
    }
}

/// A K-way classifier over whole (flattened) encodings.
#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub input: usize,
    pub num_classes: usize,
    pub params: ParamSet,
    mlp: Option<NetSpec>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, input: usize, num_classes: usize, config: &BaselineConfig) -> Self {
        let seed = mix_seed(&[config.seed, 0xba5e]);
        match kind {
            BaselineKind::Linear => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let bound = (6.0 / (input + num_classes) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let mut params = ParamSet::new();
                params.push("w", Tensor::from_fn(&[input, num_classes], |_| dist.sample(&mut rng)));
                params.push("b", Tensor::zeros(&[num_classes]));
                Baseline {
                    kind,
                    input,
                    num_classes,
                    params,
                    mlp: None,
                }
            }
            BaselineKind::NonlinearMlp => {
                let spec = NetSpec::Mlp(MlpSpec {
                    input,
                    hidden: vec![config.hidden, config.hidden],
                    output: num_classes,
                    activation: Activation::Relu,
                    dropout: 0.0,
                });
                Baseline {
                    kind,
                    input,
                    num_classes,
                    params: init_params(&spec, seed),
                    mlp: Some(spec),
                }
            }
        }
    }

    fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        let x = tape.reshape(x, &[n, self.input])?;
        match &self.mlp {
            Some(spec) => spec.forward(tape, vars, x, Mode::INFERENCE),
            None => {
                let h = tape.matmul(x, vars[0])?;
                tape.add_bias(h, vars[1])
            }
        }
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(out).clone())
    }

    /// Argmax class per sample, ties toward the lowest index.
    pub fn predict(&self, split: &Split) -> Result<Vec<Decision>> {
        let mut out = Vec::with_capacity(split.len());
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(512) {
            let logits = self.logits(&split.batch(chunk))?;
            out.extend(logits.data().chunks(self.num_classes).map(|r| Decision::Class(argmax(r))));
        }
        Ok(out)
    }

    pub fn report(&self, split: &Split, name: &str, seed: u64) -> Result<MetricsReport> {
        if split.is_empty() {
            return Err(NcvError::contract("metrics need a non-empty split"));
        }
        let d = self.predict(split)?;
        Ok(report_from_decisions(name, &split.labels, self.num_classes, &d, None, seed))
    }
}

/// Trains a baseline on `train` and reports its training accuracy.
pub fn baseline_fit(train: &Split, kind: BaselineKind, config: &BaselineConfig) -> Result<(Baseline, MetricsReport)> {
    if config.batch_size == 0 {
        return Err(NcvError::config("baseline batch_size must be positive"));
    }
    let mut model = Baseline::new(kind, train.dims.features(), train.num_classes, config);
    let mut optim = AdamState::new(AdamConfig::new(config.lr, config.weight_decay), &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xba5e, epoch as u64]));
        order.shuffle(&mut rng);
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let mut tape = Tape::new();
            let vars = model.params.bind(&mut tape, true);
            let x = tape.constant(train.batch(idx));
            let logits = model.forward(&mut tape, &vars, x)?;
            let loss = tape.cross_entropy(logits, &train.batch_labels(idx))?;
            if !tape.value(loss).item().is_finite() {
                return Err(NcvError::NonFinite {
                    epoch,
                    batch: b,
                    phase: "baseline",
                });
            }
            tape.backward(loss)?;
            let grads: Vec<Tensor> = vars
                .iter()
                .zip(model.params.tensors())
                .map(|(&v, p)| tape.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
                .collect();
            optim.step(&mut model.params, &grads)?;
        }
    }
    let report = if train.is_empty() {
        report_from_decisions("train", &[], train.num_classes, &[], None, config.seed)
    } else {
        model.report(train, "train", config.seed)?
    };
    Ok((model, report))
}
