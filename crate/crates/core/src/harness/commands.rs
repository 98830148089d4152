use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::manifest::RunManifest;
use crate::data::{
    attach_shortcut_statistics, generate_synthetic, load_bundle, save_bundle, DatasetBundle, ShortcutReport,
};
use crate::error::{NcvError, Result};
use crate::game::{write_certificates, write_log_csv, CertificateRecord, Game, LogRow};
use crate::metrics::{evaluate, exhaustive_soundness, val_test_gap, MetricsReport};
use crate::nn::checkpoint::{self, CheckpointHeader, FORMAT_VERSION};
use crate::nn::AgentRole;

pub const CHECKPOINT_FILE: &str = "checkpoint.ncvc";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_FILE: &str = "eval.json";
pub const SHORTCUT_FILE: &str = "shortcut_mi.json";
pub const CERTIFICATES_FILE: &str = "certificates.jsonl";

/// Directory-safe label for a clean ratio, e.g. `clean_5pct`.
pub fn ratio_tag(ratio: f64) -> String {
    let pct = format!("{:.2}", ratio * 100.0);
    let pct = pct.trim_end_matches('0').trim_end_matches('.');
    format!("clean_{}pct", pct.replace('.', "p"))
}

/// Generates the configured dataset in memory at an explicit clean ratio.
pub fn build_bundle(cfg: &ExperimentConfig, clean_ratio: f64, seed: u64) -> Result<DatasetBundle> {
    let preset = cfg.dataset.preset()?;
    generate_synthetic(&preset.rules(), cfg.dataset.counts()?, clean_ratio, preset.encoding(), seed)
}

#[derive(Clone, Debug)]
pub struct GenerateOutput {
    pub dirs: Vec<PathBuf>,
    pub reports: Vec<ShortcutReport>,
}

/// Writes one bundle, or one per ratio when the config carries a grid.
pub fn generate(cfg: &ExperimentConfig, out: &Path) -> Result<GenerateOutput> {
    fs::create_dir_all(out)?;
    let preset = cfg.dataset.preset()?;
    let seed = cfg.dataset.seed;
    let mut manifest = RunManifest::new("generate", cfg, vec![seed]);
    let cells: Vec<(f64, PathBuf)> = match &cfg.dataset.clean_ratio_grid {
        Some(grid) => grid.iter().map(|&r| (r, PathBuf::from(ratio_tag(r)))).collect(),
        None => vec![(cfg.dataset.clean_ratio, PathBuf::new())],
    };
    let mut result = GenerateOutput {
        dirs: Vec::new(),
        reports: Vec::new(),
    };
    for (ratio, rel) in cells {
        let dir = out.join(&rel);
        let bundle = build_bundle(cfg, ratio, seed)?;
        for path in save_bundle(&bundle, &dir, Some(preset.name()))? {
            manifest.record(out, path.strip_prefix(out).unwrap_or(&path))?;
        }
        let report = attach_shortcut_statistics(&bundle, seed);
        fs::write(dir.join(SHORTCUT_FILE), serde_json::to_string_pretty(&report)? + "\n")?;
        manifest.record(out, &rel.join(SHORTCUT_FILE))?;
        result.dirs.push(dir);
        result.reports.push(report);
    }
    manifest.write(out)?;
    Ok(result)
}

pub fn save_game(game: &Game, path: &Path) -> Result<()> {
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        spec_hash: game.spec_hash(),
        seed: game.config.seed,
    };
    checkpoint::save(path, &header, &game.agents.to_tensors())
}

/// Rebuilds the game from config and data, then restores the checkpoint.
pub fn load_game(cfg: &ExperimentConfig, bundle: &DatasetBundle, path: &Path) -> Result<Game> {
    let mut game = Game::for_bundle(cfg.game.clone(), bundle)?;
    let (header, tensors) = checkpoint::load(path)?;
    if header.version != FORMAT_VERSION {
        return Err(NcvError::format(None, format!("unsupported checkpoint version {}", header.version)));
    }
    let expected = game.spec_hash();
    if header.spec_hash != expected {
        return Err(NcvError::HashMismatch {
            checkpoint: header.spec_hash,
            config: expected,
        });
    }
    game.agents.load_tensors(tensors)?;
    Ok(game)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainMetrics {
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub game: Game,
    pub log: Vec<LogRow>,
    pub train: MetricsReport,
    pub val: Option<MetricsReport>,
}

pub fn train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainOutput> {
    let bundle = load_bundle(data)?;
    fs::create_dir_all(out)?;
    let mut game = Game::for_bundle(cfg.game.clone(), &bundle)?;
    let log = game.train(&bundle)?;
    save_game(&game, &out.join(CHECKPOINT_FILE))?;
    write_log_csv(BufWriter::new(fs::File::create(out.join(LOG_FILE))?), &log)?;
    let train = evaluate(&game, &bundle.train, "train")?;
    let val = if bundle.val.is_empty() {
        None
    } else {
        Some(evaluate(&game, &bundle.val, "val")?)
    };
    let metrics = TrainMetrics {
        train: train.clone(),
        val: val.clone(),
    };
    fs::write(out.join(METRICS_FILE), serde_json::to_string_pretty(&metrics)? + "\n")?;
    let mut manifest = RunManifest::new("train", cfg, vec![cfg.game.seed]);
    manifest.notes.push(format!("data: {}", data.display()));
    for f in [CHECKPOINT_FILE, LOG_FILE, METRICS_FILE] {
        manifest.record(out, Path::new(f))?;
    }
    manifest.write(out)?;
    Ok(TrainOutput { game, log, train, val })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub reports: Vec<MetricsReport>,
}

impl EvalOutput {
    pub fn get(&self, split: &str) -> Option<&MetricsReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

/// Reports every non-empty split. The test report carries the val–test gap.
pub fn eval(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, exhaustive: bool, out: &Path) -> Result<EvalOutput> {
    let bundle = load_bundle(data)?;
    let game = load_game(cfg, &bundle, ckpt)?;
    let mut reports = Vec::new();
    for name in ["train", "val", "test"] {
        let split = bundle.split(name)?;
        if split.is_empty() {
            continue;
        }
        let mut r = evaluate(&game, split, name)?;
        if exhaustive {
            r.soundness_exhaustive = Some(exhaustive_soundness(&game, split, cfg.game.mask_size)?);
        }
        reports.push(r);
    }
    let val = reports.iter().find(|r| r.split == "val").cloned();
    if let (Some(val), Some(test)) = (val, reports.iter_mut().find(|r| r.split == "test")) {
        test.val_test_gap = Some(val_test_gap(&val, test));
    }
    let output = EvalOutput { reports };
    fs::create_dir_all(out)?;
    fs::write(out.join(EVAL_FILE), serde_json::to_string_pretty(&output)? + "\n")?;
    let mut manifest = RunManifest::new("eval", cfg, vec![cfg.game.seed]);
    manifest.notes.push(format!("data: {}", data.display()));
    manifest.notes.push(format!("checkpoint: {}", ckpt.display()));
    manifest.record(out, Path::new(EVAL_FILE))?;
    manifest.write(out)?;
    Ok(output)
}

#[derive(Clone, Debug)]
pub struct ExplainOutput {
    pub records: Vec<CertificateRecord>,
    /// Requested ids outside the split.
    pub skipped: Vec<usize>,
}

pub fn explain(
    cfg: &ExperimentConfig,
    data: &Path,
    ckpt: &Path,
    split: &str,
    ids: &[usize],
    prover: AgentRole,
    out: &Path,
) -> Result<ExplainOutput> {
    if prover == AgentRole::Arthur {
        return Err(NcvError::config("certificates come from merlin or morgana"));
    }
    let bundle = load_bundle(data)?;
    let game = load_game(cfg, &bundle, ckpt)?;
    let s = bundle.split(split)?;
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for &id in ids {
        if id < s.len() {
            records.push(game.infer(s, id, prover)?);
        } else {
            skipped.push(id);
        }
    }
    fs::create_dir_all(out)?;
    write_certificates(BufWriter::new(fs::File::create(out.join(CERTIFICATES_FILE))?), &records)?;
    Ok(ExplainOutput { records, skipped })
}
