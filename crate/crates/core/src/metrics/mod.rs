//! Completeness, soundness, the brute-force adversary and baselines.

mod baseline;

pub use baseline::{baseline_fit, Baseline, BaselineConfig, BaselineKind};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{NcvError, Result};
use crate::game::{topk_indices, Decision, Game};
use crate::nn::AgentRole;

/// Largest mask family the exhaustive adversary will enumerate per sample.
pub const EXHAUSTIVE_GUARD: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub samples: usize,
    pub completeness: f64,
    /// Absent for baselines, which have no adversary.
    pub soundness: Option<f64>,
    #[serde(default)]
    pub soundness_exhaustive: Option<f64>,
    /// Wrong data class under Merlin's mask.
    pub wrong_rate: f64,
    /// Rejections under Merlin's mask.
    pub rejection_rate: f64,
    pub per_class_accuracy: Vec<f64>,
    #[serde(default)]
    pub val_test_gap: Option<f64>,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

fn require_nonempty(split: &Split) -> Result<()> {
    if split.is_empty() {
        Err(NcvError::contract("metrics need a non-empty split"))
    } else {
        Ok(())
    }
}

/// Accuracy per label value; `NaN` for classes absent from the split.
pub fn per_class_accuracy(predicted: &[Decision], labels: &[usize], num_classes: usize) -> Vec<f64> {
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (d, &y) in predicted.iter().zip(labels) {
        tot[y] += 1;
        if *d == Decision::Class(y) {
            hit[y] += 1;
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| if t == 0 { f64::NAN } else { h as f64 / t as f64 })
        .collect()
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    flags.filter(|&b| b).count() as f64 / n as f64
}

/// Builds a report from decisions already computed.
pub fn report_from_decisions(
    split_name: &str,
    labels: &[usize],
    num_classes: usize,
    merlin: &[Decision],
    morgana: Option<&[Decision]>,
    seed: u64,
) -> MetricsReport {
    let n = labels.len();
    let correct = fraction(merlin.iter().zip(labels).map(|(d, &y)| *d == Decision::Class(y)), n);
    let rejected = fraction(merlin.iter().map(|d| *d == Decision::Reject), n);
    let wrong = fraction(
        merlin
            .iter()
            .zip(labels)
            .map(|(d, &y)| matches!(d, Decision::Class(k) if *k != y)),
        n,
    );
    MetricsReport {
        split: split_name.to_string(),
        samples: n,
        completeness: correct,
        soundness: morgana.map(|m| fraction(m.iter().zip(labels).map(|(d, &y)| d.is_safe_for(y)), n)),
        soundness_exhaustive: None,
        wrong_rate: wrong,
        rejection_rate: rejected,
        per_class_accuracy: per_class_accuracy(merlin, labels, num_classes),
        val_test_gap: None,
        seed,
        wall_clock_seconds: 0.0,
    }
}

/// Full report for one split.
pub fn evaluate(game: &Game, split: &Split, split_name: &str) -> Result<MetricsReport> {
    require_nonempty(split)?;
    let t = Instant::now();
    let d = game.decisions(split)?;
    let mut r = report_from_decisions(
        split_name,
        &split.labels,
        game.num_classes,
        &d.merlin,
        Some(&d.morgana),
        game.config.seed,
    );
    r.wall_clock_seconds = t.elapsed().as_secs_f64();
    Ok(r)
}

/// Fraction of samples Arthur classifies correctly on Merlin's mask.
pub fn completeness(game: &Game, split: &Split) -> Result<f64> {
    require_nonempty(split)?;
    let d = game.decisions(split)?;
    Ok(fraction(d.merlin.iter().zip(&split.labels).map(|(d, &y)| *d == Decision::Class(y)), split.len()))
}

/// Fraction of samples where Morgana's mask yields the true class or reject.
pub fn soundness(game: &Game, split: &Split) -> Result<f64> {
    require_nonempty(split)?;
    let d = game.decisions(split)?;
    Ok(fraction(d.morgana.iter().zip(&split.labels).map(|(d, &y)| d.is_safe_for(y)), split.len()))
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Calls `f` with every increasing `m`-subset of `0..n` in lexicographic order.
pub fn for_each_subset(n: usize, m: usize, mut f: impl FnMut(&[usize])) {
    if m > n {
        return;
    }
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        f(&idx);
        let mut i = m;
        while i > 0 && idx[i - 1] == n - m + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return;
        }
        idx[i - 1] += 1;
        for j in i..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Fraction of samples on which every size-`m` mask over the layout's
/// units leaves Arthur at the true class or reject.
pub fn exhaustive_soundness(game: &Game, split: &Split, m: usize) -> Result<f64> {
    require_nonempty(split)?;
    let units = game.layout.units;
    if m > units {
        return Err(NcvError::contract(format!("mask size {m} exceeds unit count {units}")));
    }
    let count = binomial(units, m);
    if count > EXHAUSTIVE_GUARD {
        return Err(NcvError::contract(format!(
            "C({units}, {m}) = {count} masks per sample exceeds the guard of {EXHAUSTIVE_GUARD}; use a smaller instance"
        )));
    }
    let mut masks: Vec<Vec<bool>> = Vec::with_capacity(count as usize);
    for_each_subset(units, m, |s| {
        let mut hard = vec![false; units];
        s.iter().for_each(|&u| hard[u] = true);
        masks.push(hard);
    });
    const CHUNK: usize = 1024;
    let mut safe = 0usize;
    for i in 0..split.len() {
        let x = split.batch(&[i]);
        let y = split.labels[i];
        let mut all_safe = true;
        for group in masks.chunks(CHUNK) {
            let xs = crate::tensor::Tensor::from_fn(&split.dims.batch_shape(group.len()), |j| {
                x.data()[j % x.len()]
            });
            let hard: Vec<bool> = group.iter().flatten().copied().collect();
            let masked = game.layout.apply_hard(&xs, &hard);
            if game.decide(&game.arthur_logits(&masked)?).iter().any(|d| !d.is_safe_for(y)) {
                all_safe = false;
                break;
            }
        }
        if all_safe {
            safe += 1;
        }
    }
    Ok(safe as f64 / split.len() as f64)
}

/// Validation completeness minus test completeness.
pub fn val_test_gap(val: &MetricsReport, test: &MetricsReport) -> f64 {
    val.completeness - test.completeness
}

/// Merlin's most-likely mask for each sample, for diagnostics.
pub fn merlin_masks(game: &Game, split: &Split) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(split.len());
    for i in 0..split.len() {
        let s = game.scores(AgentRole::Merlin, &split.batch(&[i]))?;
        out.push(topk_indices(s.data(), game.config.mask_size)?);
    }
    Ok(out)
}
