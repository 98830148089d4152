use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{DatasetBundle, Dims, Split};

pub const BOOTSTRAP_RESAMPLES: usize = 100;

/// Plug-in mutual information in nats between a binary indicator and labels.
pub fn mutual_information(indicator: &[bool], labels: &[usize], num_classes: usize) -> f64 {
    let n = labels.len();
    if n == 0 {
        return 0.0;
    }
    let mut joint = vec![[0usize; 2]; num_classes];
    for (&x, &y) in indicator.iter().zip(labels) {
        joint[y][x as usize] += 1;
    }
    let nf = n as f64;
    let px = [0, 1].map(|x| joint.iter().map(|r| r[x]).sum::<usize>() as f64 / nf);
    let mut mi = 0.0;
    for row in &joint {
        let py = (row[0] + row[1]) as f64 / nf;
        for x in 0..2 {
            if row[x] > 0 {
                let pxy = row[x] as f64 / nf;
                mi += pxy * (pxy / (px[x] * py)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Standard deviation of the plug-in estimate over bootstrap resamples.
pub fn bootstrap_std(indicator: &[bool], labels: &[usize], num_classes: usize, resamples: usize, seed: u64) -> f64 {
    let n = labels.len();
    if n == 0 || resamples < 2 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xs = vec![false; n];
    let mut ys = vec![0usize; n];
    let estimates: Vec<f64> = (0..resamples)
        .map(|_| {
            for j in 0..n {
                let i = rng.gen_range(0..n);
                xs[j] = indicator[i];
                ys[j] = labels[i];
            }
            mutual_information(&xs, &ys, num_classes)
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / resamples as f64;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (resamples - 1) as f64;
    var.sqrt()
}

/// True where any of `features` is active in any slot.
pub fn feature_presence(split: &Split, features: &[usize]) -> Vec<bool> {
    let (slots, width) = match split.dims {
        Dims::Flat { width } => (1, width),
        Dims::Slot { slots, width } => (slots, width),
    };
    (0..split.len())
        .map(|i| {
            let row = split.row(i);
            (0..slots).any(|s| features.iter().any(|&f| row[s * width + f] > 0.0))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMi {
    pub split: String,
    pub samples: usize,
    pub mi: f64,
    pub bootstrap_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShortcutReport {
    /// Per-object feature indices of the shortcut values.
    pub features: Vec<usize>,
    pub feature_names: Vec<String>,
    pub splits: Vec<SplitMi>,
}

impl ShortcutReport {
    pub fn get(&self, split: &str) -> Option<&SplitMi> {
        self.splits.iter().find(|s| s.split == split)
    }
}

/// MI between shortcut presence and label on every split. Bundles without
/// rule metadata or shortcuts yield an empty feature list and zero MI.
pub fn attach_shortcut_statistics(bundle: &DatasetBundle, seed: u64) -> ShortcutReport {
    let mut features = Vec::new();
    let mut feature_names = Vec::new();
    if let Some(rules) = &bundle.rules {
        for s in &rules.shortcuts {
            let f = rules.schema.feature_index(s.attribute, s.value);
            if !features.contains(&f) {
                features.push(f);
                feature_names.push(rules.schema.describe(s.attribute, s.value));
            }
        }
    }
    let splits = [("train", &bundle.train), ("val", &bundle.val), ("test", &bundle.test)]
        .into_iter()
        .enumerate()
        .map(|(i, (name, split))| {
            let x = feature_presence(split, &features);
            SplitMi {
                split: name.into(),
                samples: split.len(),
                mi: mutual_information(&x, &split.labels, split.num_classes),
                bootstrap_std: bootstrap_std(
                    &x,
                    &split.labels,
                    split.num_classes,
                    BOOTSTRAP_RESAMPLES,
                    crate::nn::mix_seed(&[seed, i as u64]),
                ),
            }
        })
        .collect();
    ShortcutReport {
        features,
        feature_names,
        splits,
    }
}
