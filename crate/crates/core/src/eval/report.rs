use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceFailure {
    pub key: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    /// Probes that were matched.
    pub evaluated: usize,
    /// Probes whose subject has no admissible gallery entry.
    pub dropped: Vec<String>,
    /// Sequences that could not be embedded.
    pub failed: Vec<SequenceFailure>,
    pub warnings: Vec<String>,
}

impl Coverage {
    pub fn complete(&self) -> bool {
        self.dropped.is_empty() && self.failed.is_empty()
    }
}

/// Nearest gallery entry of one probe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub probe: String,
    pub gallery: String,
    pub gallery_view: String,
    pub predicted: String,
    pub correct: bool,
    pub distance: f64,
    /// 1-based rank of the first gallery entry of the probe's subject.
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub name: String,
    /// Percent; `None` when the group has no probes.
    pub rank1: Option<f64>,
    pub probes: usize,
    /// Rank-1 percent per probe view.
    pub per_view: BTreeMap<String, f64>,
    /// Percent at ranks 1..=max_rank.
    pub cmc: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    pub checkpoint: Option<String>,
    pub train_domain: Option<String>,
    pub test_domain: Option<String>,
    pub groups: Vec<GroupResult>,
    /// Mean rank-1 over groups with probes.
    pub mean: Option<f64>,
    pub coverage: Coverage,
    pub trace: Vec<MatchRecord>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.1}"))
}

fn row(cells: &[String], widths: &[usize]) -> String {
    let mut s = String::new();
    for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
        if i == 0 {
            let _ = write!(s, "{c:<w$}");
        } else {
            let _ = write!(s, "  {c:>w$}");
        }
    }
    s.trim_end().to_string()
}

fn table(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|i| rows.iter().filter_map(|r| r.get(i)).map(|c| c.chars().count()).max().unwrap_or(0))
        .collect();
    rows.iter().map(|r| row(r, &widths) + "\n").collect()
}

impl EvalReport {
    pub fn group(&self, name: &str) -> Option<&GroupResult> {
        self.groups.iter().find(|g| g.name == name)
    }

    /// Summary row (groups and mean) followed by the group × probe-view
    /// matrix.
    pub fn to_table(&self) -> String {
        let mut out = format!("protocol: {}", self.protocol);
        if let Some(c) = &self.checkpoint {
            let _ = write!(out, "  checkpoint: {c}");
        }
        if let (Some(a), Some(b)) = (&self.train_domain, &self.test_domain) {
            let _ = write!(out, "  domains: {a} -> {b}");
        }
        out.push_str("\n\n");

        let mut header = vec!["".to_string()];
        header.extend(self.groups.iter().map(|g| g.name.clone()));
        header.push("Mean".into());
        let mut values = vec!["Rank-1".to_string()];
        values.extend(self.groups.iter().map(|g| pct(g.rank1)));
        values.push(pct(self.mean));
        out.push_str(&table(&[header, values]));

        let views: BTreeSet<&String> = self.groups.iter().flat_map(|g| g.per_view.keys()).collect();
        if !views.is_empty() {
            out.push('\n');
            let mut rows = vec![std::iter::once("view".to_string()).chain(views.iter().map(|v| v.to_string())).collect()];
            for g in &self.groups {
                let mut r = vec![g.name.clone()];
                r.extend(views.iter().map(|v| pct(g.per_view.get(*v).copied())));
                rows.push(r);
            }
            out.push_str(&table(&rows));
        }
        let c = &self.coverage;
        let _ = writeln!(
            out,
            "\nprobes evaluated: {}, dropped: {}, failed sequences: {}",
            c.evaluated,
            c.dropped.len(),
            c.failed.len()
        );
        for w in &c.warnings {
            let _ = writeln!(out, "warning: {w}");
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
