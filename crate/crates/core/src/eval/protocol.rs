//! Declarative gallery/probe protocols loaded from JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{SequenceRecord, Split};

/// String pattern: exact match, or prefix match when it ends in `*`.
fn matches(pattern: &str, value: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => value.starts_with(prefix),
        None => pattern == value,
    }
}

fn any_match(patterns: &Option<Vec<String>>, value: &str) -> bool {
    patterns.as_ref().is_none_or(|ps| ps.iter().any(|p| matches(p, value)))
}

/// Conjunction of optional filters; an absent filter accepts everything.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<Vec<Split>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub views: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seqs: Option<Vec<String>>,
}

impl Rule {
    pub fn accepts(&self, r: &SequenceRecord) -> bool {
        self.splits.as_ref().is_none_or(|s| s.contains(&r.split))
            && any_match(&self.conditions, &r.condition)
            && any_match(&self.views, &r.view)
            && any_match(&self.seqs, &r.seq)
    }
}

/// Named set of probe conditions reported together.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionGroup {
    pub name: String,
    pub conditions: Vec<String>,
}

impl ConditionGroup {
    pub fn contains(&self, condition: &str) -> bool {
        self.conditions.iter().any(|p| matches(p, condition))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Every probe view weighs the same.
    #[default]
    PerView,
    PerSequence,
}

/// Reduction of part-wise Euclidean distances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartReduction {
    #[default]
    Mean,
    Min,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub name: String,
    pub gallery: Rule,
    pub probe: Rule,
    #[serde(default)]
    pub view_exclusion: bool,
    /// Empty: one group per probe condition.
    #[serde(default)]
    pub groups: Vec<ConditionGroup>,
    #[serde(default)]
    pub averaging: Averaging,
    #[serde(default)]
    pub distance: PartReduction,
    /// Highest rank stored in the CMC curve.
    #[serde(default = "default_max_rank")]
    pub max_rank: usize,
}

fn default_max_rank() -> usize {
    20
}

const BUNDLED: [(&str, &str); 2] = [
    ("ccpg", include_str!("../../protocols/ccpg.json")),
    ("synthetic", include_str!("../../protocols/synthetic.json")),
];

impl ProtocolConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let (_, text) = BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::Config(format!("no bundled protocol `{name}`")))?;
        Self::parse(text)
    }

    /// A path to a JSON file, or the name of a bundled protocol.
    pub fn resolve(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if path.exists() {
            Self::load(path)
        } else {
            Self::bundled(spec)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rank == 0 {
            return Err(Error::Config("max_rank must be positive".into()));
        }
        if self.groups.iter().any(|g| g.conditions.is_empty()) {
            return Err(Error::Config("condition groups need at least one condition".into()));
        }
        Ok(())
    }

    /// Group names a probe condition is reported under.
    pub fn groups_of(&self, condition: &str) -> Vec<String> {
        if self.groups.is_empty() {
            vec![condition.to_string()]
        } else {
            self.groups.iter().filter(|g| g.contains(condition)).map(|g| g.name.clone()).collect()
        }
    }

    /// Splits records into (gallery, probe). A record selected by both rules
    /// violates disjointness and is an error.
    pub fn select<'a>(&self, records: &'a [SequenceRecord]) -> Result<(Vec<&'a SequenceRecord>, Vec<&'a SequenceRecord>)> {
        let mut gallery = Vec::new();
        let mut probe = Vec::new();
        for r in records {
            match (self.gallery.accepts(r), self.probe.accepts(r)) {
                (true, true) => {
                    return Err(Error::Config(format!(
                        "protocol {} selects {} as both gallery and probe",
                        self.name,
                        r.key()
                    )))
                }
                (true, false) => gallery.push(r),
                (false, true) => probe.push(r),
                (false, false) => {}
            }
        }
        Ok((gallery, probe))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(cond: &str, view: &str, seq: &str, split: Split) -> SequenceRecord {
        SequenceRecord {
            subject_id: "001".into(),
            condition: cond.into(),
            view: view.into(),
            seq: seq.into(),
            split,
            frame_paths: vec![],
        }
    }

    #[test]
    fn prefix_patterns_and_absent_filters() {
        let rule = Rule {
            conditions: Some(vec!["nm-*".into(), "bg".into()]),
            ..Rule::default()
        };
        assert!(rule.accepts(&rec("nm-01", "000", "0", Split::Gallery)));
        assert!(rule.accepts(&rec("bg", "090", "1", Split::Probe)));
        assert!(!rule.accepts(&rec("bg-01", "090", "1", Split::Probe)));
        assert!(Rule::default().accepts(&rec("x", "y", "z", Split::Train)));
    }

    #[test]
    fn overlapping_rules_are_rejected() {
        let p = ProtocolConfig {
            name: "overlap".into(),
            gallery: Rule::default(),
            probe: Rule {
                views: Some(vec!["090".into()]),
                ..Rule::default()
            },
            view_exclusion: false,
            groups: vec![],
            averaging: Averaging::PerView,
            distance: PartReduction::Mean,
            max_rank: 20,
        };
        let recs = [rec("nm", "090", "0", Split::Probe)];
        assert!(p.select(&recs).is_err());
    }

    #[test]
    fn bundled_protocols_parse() {
        for name in ProtocolConfig::bundled_names() {
            let p = ProtocolConfig::bundled(name).unwrap();
            assert_eq!(p.name, name);
        }
        let ccpg = ProtocolConfig::bundled("ccpg").unwrap();
        let names: Vec<_> = ccpg.groups.iter().map(|g| g.name.as_str()).collect();
        assert_eq!(names, ["CL", "UP", "DN", "BG"]);
        assert!(ProtocolConfig::bundled("nope").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"{"name":"x","gallery":{},"probe":{},"bogus":1}"#;
        assert!(ProtocolConfig::parse(text).is_err());
    }
}
