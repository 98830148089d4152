use serde::{Deserialize, Serialize};

use super::schema::{Object, Schema};
use crate::error::{NcvError, Result};

/// At least `count` objects carrying every listed `(attribute, value)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Predicate {
    pub require: Vec<(usize, usize)>,
    pub count: usize,
}

impl Predicate {
    pub fn matches(&self, obj: &Object) -> bool {
        self.require.iter().all(|&(a, v)| obj.0[a] == v)
    }

    pub fn holds(&self, objects: &[Object]) -> bool {
        objects.iter().filter(|o| self.matches(o)).count() >= self.count
    }
}

/// A class holds when any alternative holds; an alternative holds when all
/// of its predicates hold.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRule {
    pub name: String,
    pub alternatives: Vec<Vec<Predicate>>,
}

impl ClassRule {
    pub fn holds(&self, objects: &[Object]) -> bool {
        self.alternatives
            .iter()
            .any(|alt| alt.iter().all(|p| p.holds(objects)))
    }

    /// Objects needed to instantiate each alternative.
    pub fn object_costs(&self) -> Vec<usize> {
        self.alternatives
            .iter()
            .map(|alt| alt.iter().map(|p| p.count).sum())
            .collect()
    }
}

/// Spurious assignment forced onto a class's rule objects in confounded samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortcutSpec {
    pub class: usize,
    pub attribute: usize,
    pub value: usize,
    /// Restricts the assignment to the objects of this predicate; `None`
    /// applies it to every rule object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicate: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleSpec {
    pub schema: Schema,
    pub classes: Vec<ClassRule>,
    /// Inclusive range of distractor objects per sample.
    pub distractors: (usize, usize),
    #[serde(default)]
    pub shortcuts: Vec<ShortcutSpec>,
}

impl RuleSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.classes.is_empty() {
            return Err(NcvError::config("rule spec has no classes"));
        }
        if self.distractors.0 > self.distractors.1 {
            return Err(NcvError::config("distractor range is empty"));
        }
        for (k, rule) in self.classes.iter().enumerate() {
            if rule.alternatives.is_empty() {
                return Err(NcvError::Generation {
                    class: k,
                    reason: "rule has no alternatives".into(),
                });
            }
            for pred in rule.alternatives.iter().flatten() {
                for &(a, v) in &pred.require {
                    let ok = self.schema.attributes.get(a).is_some_and(|at| v < at.values.len());
                    if !ok {
                        return Err(NcvError::config(format!(
                            "class {k} references unknown attribute value ({a}, {v})"
                        )));
                    }
                }
            }
            let cheapest = rule.object_costs().into_iter().min().unwrap_or(0);
            if cheapest > self.schema.max_objects {
                return Err(NcvError::Generation {
                    class: k,
                    reason: format!(
                        "needs {cheapest} objects but the budget is {}",
                        self.schema.max_objects
                    ),
                });
            }
        }
        for s in &self.shortcuts {
            if s.class >= self.classes.len() {
                return Err(NcvError::config(format!("shortcut names unknown class {}", s.class)));
            }
            let ok = self
                .schema
                .attributes
                .get(s.attribute)
                .is_some_and(|a| s.value < a.values.len());
            if !ok {
                return Err(NcvError::config("shortcut names an unknown attribute value"));
            }
            let referenced = self
                .classes
                .iter()
                .flat_map(|r| r.alternatives.iter().flatten())
                .any(|p| p.require.iter().any(|&(a, _)| a == s.attribute));
            if referenced {
                return Err(NcvError::config(format!(
                    "shortcut attribute {} is referenced by a class rule",
                    self.schema.attributes[s.attribute].name
                )));
            }
        }
        Ok(())
    }

    /// Indices of every class whose rule holds on `objects`.
    pub fn satisfied(&self, objects: &[Object]) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, r)| r.holds(objects))
            .map(|(k, _)| k)
            .collect()
    }
}

/// Builds a predicate from `"attr=value"` terms.
pub fn predicate(schema: &Schema, terms: &[&str], count: usize) -> Predicate {
    let require = terms
        .iter()
        .map(|t| schema.parse_assignment(t).expect("preset terms are valid"))
        .collect();
    Predicate { require, count }
}
