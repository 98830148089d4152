use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rules::RuleSpec;
use super::schema::{Object, Schema};
use crate::error::{NcvError, Result};
use crate::nn::mix_seed;
use crate::tensor::Tensor;

const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    Flat,
    Slot,
}

/// Per-sample encoding geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dims {
    Flat { width: usize },
    Slot { slots: usize, width: usize },
}

impl Dims {
    pub fn kind(self) -> EncodingKind {
        match self {
            Dims::Flat { .. } => EncodingKind::Flat,
            Dims::Slot { .. } => EncodingKind::Slot,
        }
    }

    /// Reals per sample.
    pub fn features(self) -> usize {
        match self {
            Dims::Flat { width } => width,
            Dims::Slot { slots, width } => slots * width,
        }
    }

    /// Tensor shape for a batch of `n` samples.
    pub fn batch_shape(self, n: usize) -> Vec<usize> {
        match self {
            Dims::Flat { width } => vec![n, width],
            Dims::Slot { slots, width } => vec![n, slots, width],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn new(train: usize, val: usize, test: usize) -> Self {
        SplitCounts { train, val, test }
    }
}

/// One encoded input with its label.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptSample {
    pub encoding: Tensor,
    pub label: usize,
    pub confounded: bool,
}

/// Samples of one split, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub dims: Dims,
    pub num_classes: usize,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub confounded: Vec<bool>,
    /// Generator ground truth in slot order; absent for imported files.
    pub objects: Option<Vec<Vec<Object>>>,
}

impl Split {
    pub fn empty(dims: Dims, num_classes: usize) -> Self {
        Split {
            dims,
            num_classes,
            features: Vec::new(),
            labels: Vec::new(),
            confounded: Vec::new(),
            objects: None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let f = self.dims.features();
        &self.features[i * f..(i + 1) * f]
    }

    pub fn sample(&self, i: usize) -> ConceptSample {
        ConceptSample {
            encoding: Tensor::from_parts(self.dims.batch_shape(1)[1..].to_vec(), self.row(i).to_vec()),
            label: self.labels[i],
            confounded: self.confounded[i],
        }
    }

    pub fn push(&mut self, encoding: &[f64], label: usize, confounded: bool) -> Result<()> {
        if encoding.len() != self.dims.features() {
            return Err(NcvError::Dimension {
                op: "split_push",
                lhs: vec![self.dims.features()],
                rhs: vec![encoding.len()],
            });
        }
        if label >= self.num_classes {
            return Err(NcvError::Index {
                context: "split label",
                index: label,
                bound: self.num_classes,
            });
        }
        self.features.extend_from_slice(encoding);
        self.labels.push(label);
        self.confounded.push(confounded);
        Ok(())
    }

    /// Batch tensor for the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Tensor {
        let f = self.dims.features();
        let mut data = Vec::with_capacity(idx.len() * f);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_parts(self.dims.batch_shape(idx.len()), data)
    }

    pub fn batch_labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn confounded_count(&self) -> usize {
        self.confounded.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub clean_ratio: f64,
    pub seed: u64,
    pub schema: Option<Schema>,
    pub rules: Option<RuleSpec>,
}

impl DatasetBundle {
    pub fn dims(&self) -> Dims {
        self.train.dims
    }

    pub fn num_classes(&self) -> usize {
        self.train.num_classes
    }

    pub fn split(&self, name: &str) -> Result<&Split> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(NcvError::config(format!("unknown split {other:?}"))),
        }
    }
}

pub fn dims_for(schema: &Schema, kind: EncodingKind) -> Dims {
    match kind {
        EncodingKind::Flat => Dims::Flat {
            width: schema.object_width(),
        },
        EncodingKind::Slot => Dims::Slot {
            slots: schema.max_objects,
            width: schema.object_width(),
        },
    }
}

/// Slot encoding: one-hot blocks per object, zero rows for unused slots.
/// Flat encoding: per-value object counts divided by the object budget.
pub fn encode_objects(schema: &Schema, objects: &[Object], kind: EncodingKind) -> Vec<f64> {
    let width = schema.object_width();
    let offsets = schema.offsets();
    match kind {
        EncodingKind::Slot => {
            let mut out = vec![0.0; schema.max_objects * width];
            for (s, obj) in objects.iter().enumerate() {
                for (a, &v) in obj.0.iter().enumerate() {
                    out[s * width + offsets[a] + v] = 1.0;
                }
            }
            out
        }
        EncodingKind::Flat => {
            let mut out = vec![0.0; width];
            for obj in objects {
                for (a, &v) in obj.0.iter().enumerate() {
                    out[offsets[a] + v] += 1.0;
                }
            }
            let scale = schema.max_objects as f64;
            out.iter_mut().for_each(|v| *v /= scale);
            out
        }
    }
}

fn random_object(schema: &Schema, rng: &mut ChaCha8Rng) -> Object {
    Object(
        schema
            .attributes
            .iter()
            .map(|a| rng.gen_range(0..a.values.len()))
            .collect(),
    )
}

/// Draws one scene of class `class` that satisfies exactly that class rule.
fn sample_scene(spec: &RuleSpec, class: usize, confounded: bool, rng: &mut ChaCha8Rng) -> Result<Vec<Object>> {
    let schema = &spec.schema;
    let rule = &spec.classes[class];
    let costs = rule.object_costs();
    let fitting: Vec<usize> = (0..rule.alternatives.len())
        .filter(|&i| costs[i] <= schema.max_objects)
        .collect();
    if fitting.is_empty() {
        return Err(NcvError::Generation {
            class,
            reason: "no alternative fits the object budget".into(),
        });
    }
    for _ in 0..MAX_ATTEMPTS {
        let alt = fitting[rng.gen_range(0..fitting.len())];
        let mut objects = Vec::new();
        let mut owner = Vec::new();
        for (p, pred) in rule.alternatives[alt].iter().enumerate() {
            for _ in 0..pred.count {
                owner.push(p);
                let mut o = random_object(schema, rng);
                for &(a, v) in &pred.require {
                    o.0[a] = v;
                }
                objects.push(o);
            }
        }
        let n_rule = objects.len();
        let room = schema.max_objects - n_rule;
        let lo = spec.distractors.0.min(room);
        let hi = spec.distractors.1.min(room);
        let n_distract = rng.gen_range(lo..=hi);
        for _ in 0..n_distract {
            objects.push(random_object(schema, rng));
        }
        if confounded && !spec.shortcuts.is_empty() {
            place_shortcuts(spec, class, &owner, &mut objects);
        }
        objects.shuffle(rng);
        if spec.satisfied(&objects) == [class] {
            return Ok(objects);
        }
    }
    Err(NcvError::Generation {
        class,
        reason: format!("no exclusive scene found in {MAX_ATTEMPTS} attempts"),
    })
}

/// Rule objects of `class` take its shortcut values; every other attribute
/// keeps its random draw. `owner[i]` is the predicate of rule object `i`.
fn place_shortcuts(spec: &RuleSpec, class: usize, owner: &[usize], objects: &mut [Object]) {
    for (obj, &p) in objects.iter_mut().zip(owner) {
        for s in spec.shortcuts.iter().filter(|s| s.class == class) {
            if s.predicate.map_or(true, |q| q == p) {
                obj.0[s.attribute] = s.value;
            }
        }
    }
}

fn generate_split(
    spec: &RuleSpec,
    n: usize,
    clean_ratio: f64,
    kind: EncodingKind,
    seed: u64,
    stream: u64,
) -> Result<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, stream]));
    let k = spec.num_classes();
    let mut split = Split::empty(dims_for(&spec.schema, kind), k);
    // exactly round(clean_ratio * n) clean samples, at random positions
    let n_clean = (clean_ratio * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i >= n_clean).collect();
    flags.shuffle(&mut rng);
    let mut objects = Vec::with_capacity(n);
    for confounded in flags {
        let class = rng.gen_range(0..k);
        let scene = sample_scene(spec, class, confounded, &mut rng)?;
        split.push(&encode_objects(&spec.schema, &scene, kind), class, confounded)?;
        objects.push(scene);
    }
    split.objects = Some(objects);
    Ok(split)
}

/// Generates train/val/test splits. Train and val carry confounded samples
/// at rate `1 - clean_ratio`; test is always clean.
pub fn generate_synthetic(
    spec: &RuleSpec,
    counts: SplitCounts,
    clean_ratio: f64,
    kind: EncodingKind,
    seed: u64,
) -> Result<DatasetBundle> {
    if !(0.0..=1.0).contains(&clean_ratio) {
        return Err(NcvError::config(format!("clean_ratio {clean_ratio} outside [0, 1]")));
    }
    spec.validate()?;
    Ok(DatasetBundle {
        train: generate_split(spec, counts.train, clean_ratio, kind, seed, 1)?,
        val: generate_split(spec, counts.val, clean_ratio, kind, seed, 2)?,
        test: generate_split(spec, counts.test, 1.0, kind, seed, 3)?,
        clean_ratio,
        seed,
        schema: Some(spec.schema.clone()),
        rules: Some(spec.clone()),
    })
}
