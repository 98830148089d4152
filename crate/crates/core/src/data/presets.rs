use serde::{Deserialize, Serialize};

use super::generate::{EncodingKind, SplitCounts};
use super::rules::{predicate, ClassRule, RuleSpec, ShortcutSpec};
use super::schema::Schema;
use crate::error::{NcvError, Result};

/// Named generator presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Hans3Analog,
    Hans7Analog,
    Xor2,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "hans3-analog" => Ok(Preset::Hans3Analog),
            "hans7-analog" => Ok(Preset::Hans7Analog),
            "xor2" => Ok(Preset::Xor2),
            other => Err(NcvError::config(format!("unknown dataset preset {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Hans3Analog => "hans3-analog",
            Preset::Hans7Analog => "hans7-analog",
            Preset::Xor2 => "xor2",
        }
    }

    pub fn rules(self) -> RuleSpec {
        match self {
            Preset::Hans3Analog => hans3(),
            Preset::Hans7Analog => hans7(),
            Preset::Xor2 => xor2(),
        }
    }

    pub fn encoding(self) -> EncodingKind {
        match self {
            Preset::Xor2 => EncodingKind::Flat,
            _ => EncodingKind::Slot,
        }
    }

    /// Desk-scale split sizes.
    pub fn default_counts(self) -> SplitCounts {
        match self {
            Preset::Hans3Analog => SplitCounts::new(3000, 750, 750),
            Preset::Hans7Analog => SplitCounts::new(3500, 1050, 1050),
            Preset::Xor2 => SplitCounts::new(500, 250, 250),
        }
    }
}

fn rule(schema: &Schema, name: &str, preds: &[(&[&str], usize)]) -> ClassRule {
    ClassRule {
        name: name.to_string(),
        alternatives: vec![preds
            .iter()
            .map(|(terms, count)| predicate(schema, terms, *count))
            .collect()],
    }
}

fn gray_shortcut(schema: &Schema, class: usize, predicate: Option<usize>) -> ShortcutSpec {
    let (attribute, value) = schema.parse_assignment("color=gray").unwrap();
    ShortcutSpec {
        class,
        attribute,
        value,
        predicate,
    }
}

fn hans3() -> RuleSpec {
    let s = Schema::clevr();
    let classes = vec![
        rule(
            &s,
            "large cube and large cylinder",
            &[(&["size=large", "shape=cube"], 1), (&["size=large", "shape=cylinder"], 1)],
        ),
        rule(
            &s,
            "small metal cube and small metal sphere",
            &[
                (&["size=small", "material=metal", "shape=cube"], 1),
                (&["size=small", "material=metal", "shape=sphere"], 1),
            ],
        ),
        rule(
            &s,
            "large rubber sphere and small cylinder",
            &[
                (&["size=large", "material=rubber", "shape=sphere"], 1),
                (&["size=small", "shape=cylinder"], 1),
            ],
        ),
    ];
    let shortcuts = vec![gray_shortcut(&s, 0, Some(0))];
    RuleSpec {
        schema: s,
        classes,
        distractors: (1, 4),
        shortcuts,
    }
}

fn hans7() -> RuleSpec {
    let s = Schema::clevr();
    let classes = vec![
        rule(
            &s,
            "large cube and large cylinder",
            &[(&["size=large", "shape=cube"], 1), (&["size=large", "shape=cylinder"], 1)],
        ),
        rule(
            &s,
            "small metal cube and small metal sphere",
            &[
                (&["size=small", "material=metal", "shape=cube"], 1),
                (&["size=small", "material=metal", "shape=sphere"], 1),
            ],
        ),
        rule(
            &s,
            "large rubber sphere and small cylinder",
            &[
                (&["size=large", "material=rubber", "shape=sphere"], 1),
                (&["size=small", "shape=cylinder"], 1),
            ],
        ),
        rule(&s, "three metal spheres", &[(&["material=metal", "shape=sphere"], 3)]),
        rule(
            &s,
            "small rubber cube and large metal cylinder",
            &[
                (&["size=small", "material=rubber", "shape=cube"], 1),
                (&["size=large", "material=metal", "shape=cylinder"], 1),
            ],
        ),
        rule(
            &s,
            "two large rubber cylinders",
            &[(&["size=large", "material=rubber", "shape=cylinder"], 2)],
        ),
        rule(
            &s,
            "small rubber sphere, small rubber cylinder and large metal sphere",
            &[
                (&["size=small", "material=rubber", "shape=sphere"], 1),
                (&["size=small", "material=rubber", "shape=cylinder"], 1),
                (&["size=large", "material=metal", "shape=sphere"], 1),
            ],
        ),
    ];
    let shortcuts = vec![gray_shortcut(&s, 0, None), gray_shortcut(&s, 3, None)];
    RuleSpec {
        schema: s,
        classes,
        distractors: (1, 3),
        shortcuts,
    }
}

/// Single-object scenes labelled by `large XOR metal`.
fn xor2() -> RuleSpec {
    let s = Schema::binary4(1);
    let one = |terms: &[&str]| vec![predicate(&s, terms, 1)];
    let classes = vec![
        ClassRule {
            name: "large == metal".into(),
            alternatives: vec![
                one(&["size=large", "material=metal"]),
                one(&["size=small", "material=rubber"]),
            ],
        },
        ClassRule {
            name: "large != metal".into(),
            alternatives: vec![
                one(&["size=large", "material=rubber"]),
                one(&["size=small", "material=metal"]),
            ],
        },
    ];
    RuleSpec {
        schema: s,
        classes,
        distractors: (0, 0),
        shortcuts: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Hans3Analog, Preset::Hans7Analog, Preset::Xor2] {
            p.rules().validate().unwrap();
            assert_eq!(Preset::parse(p.name()).unwrap(), p);
        }
        assert_eq!(Preset::Hans3Analog.rules().num_classes(), 3);
        assert_eq!(Preset::Hans7Analog.rules().num_classes(), 7);
        assert_eq!(Preset::Xor2.rules().schema.object_width(), 8);
    }
}
