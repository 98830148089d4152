use std::cmp::Ordering;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Dims, Schema};
use crate::error::{NcvError, Result};
use crate::tensor::Tensor;

/// What one selectable unit covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// A single real of the encoding.
    Feature,
    /// A whole slot.
    SlotBlock,
    /// One attribute's one-hot block inside one slot.
    AttributeBlock,
}

/// Exactly `m` selected units in increasing order, plus the scores used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSelection {
    pub indices: Vec<usize>,
    pub granularity: Granularity,
    pub scores: Vec<f64>,
}

impl MaskSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    move |&a, &b| {
        key(scores[b])
            .partial_cmp(&key(scores[a]))
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    }
}

/// Indices of the `m` largest scores, ties toward the lower index, sorted
/// ascending. NaN ranks below every number.
pub fn topk_indices(scores: &[f64], m: usize) -> Result<Vec<usize>> {
    if m > scores.len() {
        return Err(NcvError::contract(format!(
            "mask size {m} exceeds unit count {}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if m < idx.len() && m > 0 {
        idx.select_nth_unstable_by(m - 1, by_score_desc(scores));
    }
    idx.truncate(m);
    idx.sort_unstable();
    Ok(idx)
}

pub fn topk_mask(scores: &[f64], m: usize, granularity: Granularity) -> Result<MaskSelection> {
    Ok(MaskSelection {
        indices: topk_indices(scores, m)?,
        granularity,
        scores: scores.to_vec(),
    })
}

/// Mapping from encoding positions to selectable units.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitLayout {
    pub granularity: Granularity,
    pub dims: Dims,
    pub units: usize,
    /// Units owned by each slot (the whole encoding counts as one slot when flat).
    pub units_per_slot: usize,
    pub unit_of_feature: Arc<[usize]>,
    pub schema: Option<Schema>,
}

impl UnitLayout {
    pub fn new(dims: Dims, granularity: Granularity, schema: Option<&Schema>) -> Result<Self> {
        let (slots, width) = match dims {
            Dims::Flat { width } => (1, width),
            Dims::Slot { slots, width } => (slots, width),
        };
        if let Some(s) = schema {
            if s.object_width() != width {
                return Err(NcvError::contract(format!(
                    "schema object width {} does not match encoding width {width}",
                    s.object_width()
                )));
            }
        }
        let within: Vec<usize> = match (granularity, dims) {
            (Granularity::Feature, _) => (0..width).collect(),
            (Granularity::SlotBlock, Dims::Slot { .. }) => vec![0; width],
            (Granularity::AttributeBlock, Dims::Slot { .. }) => {
                let s = schema.ok_or_else(|| {
                    NcvError::contract("attribute_block granularity needs a schema")
                })?;
                (0..width).map(|f| s.decode_feature(f).unwrap().0).collect()
            }
            (g, Dims::Flat { .. }) => {
                return Err(NcvError::contract(format!(
                    "{g:?} granularity requires slot encodings"
                )))
            }
        };
        let per = within.iter().max().map_or(0, |m| m + 1);
        let unit_of_feature: Vec<usize> = (0..slots)
            .flat_map(|s| within.iter().map(move |&u| s * per + u))
            .collect();
        Ok(UnitLayout {
            granularity,
            dims,
            units: slots * per,
            units_per_slot: per,
            unit_of_feature: unit_of_feature.into(),
            schema: schema.cloned(),
        })
    }

    pub fn features(&self) -> usize {
        self.unit_of_feature.len()
    }

    fn check(&self, mask: &MaskSelection) -> Result<()> {
        if mask.granularity != self.granularity {
            return Err(NcvError::contract(format!(
                "mask granularity {:?} does not match layout {:?}",
                mask.granularity, self.granularity
            )));
        }
        if let Some(&bad) = mask.indices.iter().find(|&&u| u >= self.units) {
            return Err(NcvError::Index {
                context: "mask unit",
                index: bad,
                bound: self.units,
            });
        }
        Ok(())
    }

    /// Zeroes every position outside the selected units of one sample.
    pub fn apply(&self, encoding: &Tensor, mask: &MaskSelection) -> Result<Tensor> {
        self.check(mask)?;
        if encoding.len() != self.features() {
            return Err(NcvError::Dimension {
                op: "apply_mask",
                lhs: vec![self.features()],
                rhs: encoding.shape().to_vec(),
            });
        }
        let mut keep = vec![false; self.units];
        for &u in &mask.indices {
            keep[u] = true;
        }
        let data = encoding
            .data()
            .iter()
            .zip(self.unit_of_feature.iter())
            .map(|(&v, &u)| if keep[u] { v } else { 0.0 })
            .collect();
        Ok(Tensor::from_parts(encoding.shape().to_vec(), data))
    }

    /// Row-wise hard selection for a batch of scores `[n × units]`.
    pub fn hard_units(&self, scores: &Tensor, m: usize) -> Result<Vec<bool>> {
        let (n, u) = scores.rows_cols();
        if u != self.units {
            return Err(NcvError::Dimension {
                op: "hard_units",
                lhs: vec![n, self.units],
                rhs: scores.shape().to_vec(),
            });
        }
        let mut hard = vec![false; n * u];
        for (i, row) in scores.data().chunks(u).enumerate() {
            for j in topk_indices(row, m)? {
                hard[i * u + j] = true;
            }
        }
        Ok(hard)
    }

    /// Masks a batch given its row-wise hard selection.
    pub fn apply_hard(&self, x: &Tensor, hard: &[bool]) -> Tensor {
        let f = self.features();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (row, pos) = (i / f, i % f);
                if hard[row * self.units + self.unit_of_feature[pos]] {
                    v
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    /// Human-readable name of `unit` given the sample's raw encoding.
    pub fn describe_unit(&self, unit: usize, row: &[f64]) -> String {
        let width = match self.dims {
            Dims::Flat { width } | Dims::Slot { width, .. } => width,
        };
        let slot = unit / self.units_per_slot.max(1);
        let local = unit % self.units_per_slot.max(1);
        let seg = &row[slot * width..(slot + 1) * width];
        let feature_name = |f: usize| match self.schema.as_ref().and_then(|s| s.decode_feature(f).map(|(a, v)| (s, a, v))) {
            Some((s, a, v)) => s.describe(a, v),
            None => format!("feature {f}"),
        };
        let active = |range: std::ops::Range<usize>| -> Vec<String> {
            range.filter(|&f| seg[f] != 0.0).map(feature_name).collect()
        };
        let body = match self.granularity {
            Granularity::Feature => feature_name(local),
            Granularity::SlotBlock => {
                let names = active(0..width);
                if names.is_empty() {
                    "empty".into()
                } else {
                    names.join(", ")
                }
            }
            Granularity::AttributeBlock => {
                let s = self.schema.as_ref().expect("attribute blocks carry a schema");
                let start = s.offsets()[local];
                let names = active(start..start + s.attributes[local].values.len());
                if names.is_empty() {
                    format!("{}=none", s.attributes[local].name)
                } else {
                    names.join(", ")
                }
            }
        };
        match self.dims {
            Dims::Flat { .. } => body,
            Dims::Slot { .. } => format!("slot {slot}: {body}"),
        }
    }
}

/// `apply_mask` for one sample.
pub fn apply_mask(layout: &UnitLayout, encoding: &Tensor, mask: &MaskSelection) -> Result<Tensor> {
    layout.apply(encoding, mask)
}
