use serde::{Deserialize, Serialize};

use crate::error::{NcvError, Result};

/// A named categorical attribute.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub values: Vec<String>,
}

impl Attribute {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Attribute {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

/// Attribute vocabulary of one object, plus the per-scene object budget.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<Attribute>,
    pub max_objects: usize,
}

/// Attribute value indices, one per schema attribute.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object(pub Vec<usize>);

impl Schema {
    /// CLEVR vocabulary: 3 shapes, 2 sizes, 8 colors, 2 materials.
    pub fn clevr() -> Self {
        Schema {
            attributes: vec![
                Attribute::new("shape", &["cube", "sphere", "cylinder"]),
                Attribute::new("size", &["small", "large"]),
                Attribute::new(
                    "color",
                    &["gray", "red", "blue", "green", "brown", "purple", "cyan", "yellow"],
                ),
                Attribute::new("material", &["rubber", "metal"]),
            ],
            max_objects: 10,
        }
    }

    /// Four binary attributes; eight concepts in total.
    pub fn binary4(max_objects: usize) -> Self {
        Schema {
            attributes: vec![
                Attribute::new("size", &["small", "large"]),
                Attribute::new("material", &["rubber", "metal"]),
                Attribute::new("shape", &["cube", "sphere"]),
                Attribute::new("color", &["red", "blue"]),
            ],
            max_objects,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() || self.max_objects == 0 {
            return Err(NcvError::config("schema needs attributes and a positive object budget"));
        }
        if let Some(a) = self.attributes.iter().find(|a| a.values.is_empty()) {
            return Err(NcvError::config(format!("attribute {} has no values", a.name)));
        }
        Ok(())
    }

    /// Width of one object's one-hot block concatenation.
    pub fn object_width(&self) -> usize {
        self.attributes.iter().map(|a| a.values.len()).sum()
    }

    /// Start offset of each attribute's one-hot block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.attributes.len());
        let mut acc = 0;
        for a in &self.attributes {
            off.push(acc);
            acc += a.values.len();
        }
        off
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    pub fn value_index(&self, attr: usize, value: &str) -> Option<usize> {
        self.attributes.get(attr)?.values.iter().position(|v| v == value)
    }

    /// Flat feature index of `attr = value`.
    pub fn feature_index(&self, attr: usize, value: usize) -> usize {
        self.offsets()[attr] + value
    }

    /// `(attribute, value)` behind a position inside one object block.
    pub fn decode_feature(&self, feature: usize) -> Option<(usize, usize)> {
        let mut acc = 0;
        for (i, a) in self.attributes.iter().enumerate() {
            if feature < acc + a.values.len() {
                return Some((i, feature - acc));
            }
            acc += a.values.len();
        }
        None
    }

    pub fn describe(&self, attr: usize, value: usize) -> String {
        let a = &self.attributes[attr];
        format!("{}={}", a.name, a.values[value])
    }

    /// Parses `"size=small"`.
    pub fn parse_assignment(&self, text: &str) -> Result<(usize, usize)> {
        let (name, value) = text
            .split_once('=')
            .ok_or_else(|| NcvError::config(format!("expected attr=value, got {text:?}")))?;
        let a = self
            .attribute_index(name.trim())
            .ok_or_else(|| NcvError::config(format!("unknown attribute {name:?}")))?;
        let v = self
            .value_index(a, value.trim())
            .ok_or_else(|| NcvError::config(format!("unknown value {value:?} for {name}")))?;
        Ok((a, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clevr_block_width_is_fifteen() {
        let s = Schema::clevr();
        assert_eq!(s.object_width(), 15);
        assert_eq!(s.offsets(), vec![0, 3, 5, 13]);
        assert_eq!(s.decode_feature(14), Some((3, 1)));
        assert_eq!(s.describe(3, 1), "material=metal");
        assert_eq!(s.parse_assignment("color=gray").unwrap(), (2, 0));
        assert!(s.parse_assignment("color=octarine").is_err());
    }
}
