use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::mask::{Granularity, UnitLayout};
use crate::data::{Dims, EncodingKind};
use crate::error::{NcvError, Result};
use crate::nn::{Activation, AdamConfig, MlpSpec, NetSpec, Pooling, Readout, SetEncoderSpec, SetVariant};

/// Network family for one agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Mlp,
    SumPoolMlp,
    AttentionBlocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameConfig {
    pub gamma: f64,
    pub mask_size: usize,
    /// Must match the dataset when set.
    #[serde(default)]
    pub num_classes: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_verifier: f64,
    pub lr_provers: f64,
    pub wd_verifier: f64,
    pub wd_provers: f64,
    /// Weight of `mean(sigmoid(scores))` added to each prover objective.
    pub l1: f64,
    pub selector: Arch,
    pub verifier: Arch,
    pub prover_hidden: usize,
    pub verifier_hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_blocks")]
    pub blocks: usize,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub granularity: Granularity,
    pub encoding: EncodingKind,
    pub seed: u64,
    /// Train Morgana and include her in the verifier objective.
    #[serde(default = "yes")]
    pub adversary: bool,
    /// Verifier epochs on unmasked inputs before the game starts.
    #[serde(default)]
    pub arthur_pretrain_epochs: usize,
    /// Standardize each row of prover scores before selection, keeping the
    /// sigmoid surrogate away from saturation. Does not change the ranking.
    #[serde(default = "yes")]
    pub standardize_scores: bool,
    /// Epochs over which the training mask shrinks from all units to
    /// `mask_size`. Evaluation always uses `mask_size`.
    #[serde(default)]
    pub mask_warmup_epochs: usize,
    /// Epochs of patience on validation completeness; `None` disables.
    #[serde(default)]
    pub early_stopping: Option<usize>,
}

fn default_heads() -> usize {
    4
}
fn default_blocks() -> usize {
    2
}
fn default_activation() -> Activation {
    Activation::Relu
}
fn yes() -> bool {
    true
}

impl GameConfig {
    /// Slot-encoded rule benchmarks.
    pub fn hans_slot() -> Self {
        GameConfig {
            gamma: 0.5,
            mask_size: 12,
            num_classes: None,
            epochs: 60,
            batch_size: 64,
            lr_verifier: 1e-3,
            lr_provers: 3e-3,
            wd_verifier: 1e-4,
            wd_provers: 1e-4,
            l1: 0.0,
            selector: Arch::SumPoolMlp,
            verifier: Arch::SumPoolMlp,
            prover_hidden: 64,
            verifier_hidden: 64,
            heads: 4,
            blocks: 2,
            dropout: 0.0,
            activation: Activation::Relu,
            granularity: Granularity::AttributeBlock,
            encoding: EncodingKind::Slot,
            seed: 0,
            adversary: true,
            arthur_pretrain_epochs: 5,
            mask_warmup_epochs: 0,
            standardize_scores: true,
            early_stopping: None,
        }
    }

    /// Flat concept vectors.
    pub fn flat() -> Self {
        GameConfig {
            gamma: 0.5,
            mask_size: 32,
            num_classes: None,
            epochs: 50,
            batch_size: 512,
            lr_verifier: 1e-4,
            lr_provers: 5e-4,
            wd_verifier: 1e-4,
            wd_provers: 1e-4,
            l1: 0.1,
            selector: Arch::Mlp,
            verifier: Arch::Mlp,
            prover_hidden: 512,
            verifier_hidden: 512,
            heads: 4,
            blocks: 2,
            dropout: 0.3,
            activation: Activation::Relu,
            granularity: Granularity::Feature,
            encoding: EncodingKind::Flat,
            seed: 0,
            adversary: true,
            arthur_pretrain_epochs: 0,
            mask_warmup_epochs: 0,
            standardize_scores: true,
            early_stopping: None,
        }
    }

    /// Small flat game for the two-feature XOR toy.
    pub fn xor_flat() -> Self {
        GameConfig {
            mask_size: 2,
            epochs: 60,
            batch_size: 32,
            lr_verifier: 3e-3,
            lr_provers: 3e-3,
            l1: 0.0,
            prover_hidden: 64,
            verifier_hidden: 64,
            dropout: 0.0,
            arthur_pretrain_epochs: 5,
            ..Self::flat()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(NcvError::config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(NcvError::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NcvError::config("dropout must lie in [0, 1)"));
        }
        for (name, v) in [
            ("lr_verifier", self.lr_verifier),
            ("lr_provers", self.lr_provers),
            ("wd_verifier", self.wd_verifier),
            ("wd_provers", self.wd_provers),
            ("l1", self.l1),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(NcvError::config(format!("{name} must be finite and non-negative")));
            }
        }
        if self.prover_hidden == 0 || self.verifier_hidden == 0 {
            return Err(NcvError::config("hidden widths must be positive"));
        }
        Ok(())
    }

    /// Checks the config against a dataset geometry.
    pub fn validate_for(&self, layout: &UnitLayout, num_classes: usize) -> Result<()> {
        self.validate()?;
        if layout.dims.kind() != self.encoding {
            return Err(NcvError::contract(format!(
                "config expects {:?} encodings, dataset is {:?}",
                self.encoding,
                layout.dims.kind()
            )));
        }
        if let Some(k) = self.num_classes {
            if k != num_classes {
                return Err(NcvError::contract(format!(
                    "config says {k} classes, dataset has {num_classes}"
                )));
            }
        }
        if self.mask_size > layout.units {
            return Err(NcvError::contract(format!(
                "mask size {} exceeds {} selectable units",
                self.mask_size, layout.units
            )));
        }
        Ok(())
    }

    fn net(&self, arch: Arch, dims: Dims, hidden: usize, output: usize, per_slot: bool) -> Result<NetSpec> {
        let dropout = self.dropout;
        match (arch, dims) {
            (Arch::Mlp, _) => Ok(NetSpec::Mlp(MlpSpec {
                input: dims.features(),
                hidden: vec![hidden, hidden],
                output: if per_slot {
                    match dims {
                        Dims::Slot { slots, .. } => slots * output,
                        Dims::Flat { .. } => output,
                    }
                } else {
                    output
                },
                activation: self.activation,
                dropout,
            })),
            (set_arch, Dims::Slot { width, .. }) => Ok(NetSpec::Set(SetEncoderSpec {
                variant: if set_arch == Arch::AttentionBlocks {
                    SetVariant::AttentionBlocks
                } else {
                    SetVariant::SumPoolMlp
                },
                slot_width: width,
                hidden,
                blocks: self.blocks,
                heads: self.heads,
                pooling: Pooling::Sum,
                readout: if per_slot { Readout::PerSlot } else { Readout::Pooled },
                output,
                activation: self.activation,
            })),
            (a, Dims::Flat { .. }) => Err(NcvError::config(format!("{a:?} needs slot encodings"))),
        }
    }

    /// Merlin, Morgana and Arthur architectures with their optimizers.
    pub fn agent_specs(&self, layout: &UnitLayout, num_classes: usize) -> Result<[(NetSpec, AdamConfig); 3]> {
        let prover = self.net(self.selector, layout.dims, self.prover_hidden, layout.units_per_slot, true)?;
        let verifier = self.net(self.verifier, layout.dims, self.verifier_hidden, num_classes + 1, false)?;
        let p_opt = AdamConfig::new(self.lr_provers, self.wd_provers);
        let v_opt = AdamConfig::new(self.lr_verifier, self.wd_verifier);
        Ok([(prover.clone(), p_opt), (prover, p_opt), (verifier, v_opt)])
    }
}

/// Stable fingerprint of the agent architectures.
pub fn spec_hash(specs: &[NetSpec]) -> u64 {
    let mut h = Sha256::new();
    for s in specs {
        h.update(serde_json::to_vec(s).expect("specs serialize"));
        h.update([0xff]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}
