use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{EncodingKind, Preset, SplitCounts};
use crate::error::{NcvError, Result};
use crate::game::GameConfig;
use crate::metrics::BaselineConfig;

/// Which dataset to build and how.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub preset: String,
    /// Preset sizes when absent.
    #[serde(default)]
    pub counts: Option<SplitCounts>,
    pub clean_ratio: f64,
    pub seed: u64,
    /// When set, `generate` writes one bundle per ratio.
    #[serde(default)]
    pub clean_ratio_grid: Option<Vec<f64>>,
}

impl DatasetConfig {
    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.preset)
    }

    pub fn counts(&self) -> Result<SplitCounts> {
        Ok(self.counts.unwrap_or(self.preset()?.default_counts()))
    }

    pub fn encoding(&self) -> Result<EncodingKind> {
        Ok(self.preset()?.encoding())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    NonlinearMlp,
    Ncv,
}

impl ModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Linear => "CBM (lin.)",
            ModelKind::NonlinearMlp => "CBM (nonlin.)",
            ModelKind::Ncv => "NCV",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub seeds: Vec<u64>,
    pub clean_ratios: Vec<f64>,
    pub models: Vec<ModelKind>,
    /// NCV cells are repeated for each mask size when set.
    #[serde(default)]
    pub mask_sizes: Option<Vec<usize>>,
}

/// One JSON file configures every command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub game: GameConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    pub sweep: SweepConfig,
}

pub const PRESETS: [&str; 5] = ["hans3-analog", "hans7-analog", "xor2", "shortcut-grid", "mask-ablation"];

/// Paper-scale training split of the shortcut grid.
pub const GRID_TRAIN: usize = 10_500;

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let seeds = vec![0, 1, 2, 3, 4];
        let ncv_only = SweepConfig {
            seeds: seeds.clone(),
            clean_ratios: vec![1.0],
            models: vec![ModelKind::Ncv],
            mask_sizes: None,
        };
        let dataset = |preset: &str| DatasetConfig {
            preset: preset.to_string(),
            counts: None,
            clean_ratio: 1.0,
            seed: 0,
            clean_ratio_grid: None,
        };
        let cfg = match name {
            "hans3-analog" | "hans7-analog" => ExperimentConfig {
                dataset: dataset(name),
                game: GameConfig::hans_slot(),
                baseline: BaselineConfig::default(),
                sweep: ncv_only,
            },
            "xor2" => ExperimentConfig {
                dataset: dataset(name),
                game: GameConfig::xor_flat(),
                baseline: BaselineConfig::default(),
                sweep: SweepConfig {
                    models: vec![ModelKind::Linear, ModelKind::NonlinearMlp, ModelKind::Ncv],
                    ..ncv_only
                },
            },
            "shortcut-grid" => {
                let ratios = vec![0.0, 0.01, 0.05, 0.2];
                ExperimentConfig {
                    dataset: DatasetConfig {
                        counts: Some(SplitCounts::new(GRID_TRAIN, GRID_TRAIN / 4, GRID_TRAIN / 4)),
                        clean_ratio: 0.0,
                        clean_ratio_grid: Some(ratios.clone()),
                        ..dataset("hans3-analog")
                    },
                    game: GameConfig::hans_slot(),
                    baseline: BaselineConfig::default(),
                    sweep: SweepConfig {
                        seeds,
                        clean_ratios: ratios,
                        models: vec![ModelKind::Linear, ModelKind::NonlinearMlp, ModelKind::Ncv],
                        mask_sizes: None,
                    },
                }
            }
            "mask-ablation" => ExperimentConfig {
                dataset: dataset("hans3-analog"),
                game: GameConfig::hans_slot(),
                baseline: BaselineConfig::default(),
                sweep: SweepConfig {
                    mask_sizes: Some(vec![4, 6, 12]),
                    ..ncv_only
                },
            },
            other => {
                return Err(NcvError::config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(cfg)
    }

    /// Parses a config file, or the config snapshot inside a run manifest.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let v = match v.get("config") {
            Some(inner) if v.get("artifacts").is_some() => inner.clone(),
            _ => v,
        };
        let cfg: ExperimentConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let preset = self.dataset.preset()?;
        if !(0.0..=1.0).contains(&self.dataset.clean_ratio) {
            return Err(NcvError::config("dataset.clean_ratio outside [0, 1]"));
        }
        for &r in self.dataset.clean_ratio_grid.iter().flatten().chain(&self.sweep.clean_ratios) {
            if !(0.0..=1.0).contains(&r) {
                return Err(NcvError::config(format!("clean ratio {r} outside [0, 1]")));
            }
        }
        if self.game.encoding != preset.encoding() {
            return Err(NcvError::config(format!(
                "game.encoding {:?} does not match preset {} ({:?})",
                self.game.encoding,
                preset.name(),
                preset.encoding()
            )));
        }
        self.game.validate()?;
        if self.baseline.batch_size == 0 {
            return Err(NcvError::config("baseline.batch_size must be positive"));
        }
        if self.sweep.models.is_empty() || self.sweep.clean_ratios.is_empty() {
            return Err(NcvError::config("sweep needs at least one model and one clean ratio"));
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides. Values parse as JSON when they
    /// can and fall back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for item in overrides {
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| NcvError::config(format!("override {item:?} is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut v, path.trim(), value)?;
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(v).map_err(|e| NcvError::config(format!("override produced an invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| NcvError::config(format!("override path {path:?}: {part:?} is not inside an object")))?;
        if !obj.contains_key(*part) {
            return Err(NcvError::config(format!("override path {path:?}: unknown key {part:?}")));
        }
        if last {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).unwrap();
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
    }
    Ok(())
}
