use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Gallery,
    Probe,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Gallery => "gallery",
            Split::Probe => "probe",
        })
    }
}

/// One walking sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceRecord {
    #[serde(rename = "id")]
    pub subject_id: String,
    pub condition: String,
    pub view: String,
    pub seq: String,
    pub split: Split,
    #[serde(rename = "frames")]
    pub frame_paths: Vec<PathBuf>,
}

impl SequenceRecord {
    /// `id/condition/view/seq`, unique within a manifest.
    pub fn key(&self) -> String {
        format!("{}/{}/{}/{}", self.subject_id, self.condition, self.view, self.seq)
    }

    pub fn frame_count(&self) -> usize {
        self.frame_paths.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(rename = "dataset")]
    pub dataset_name: String,
    pub entries: Vec<SequenceRecord>,
    /// Directory relative frame paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

/// Identity and sequence counts per split.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub identities: usize,
    pub sequences: usize,
    pub conditions: BTreeSet<String>,
}

impl DatasetManifest {
    /// Builds and validates an in-memory manifest.
    pub fn new(dataset_name: impl Into<String>, entries: Vec<SequenceRecord>) -> Result<Self> {
        let m = Self {
            dataset_name: dataset_name.into(),
            entries,
            root: PathBuf::new(),
        };
        m.validate(Path::new("<memory>"))?;
        Ok(m)
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.frame_paths.is_empty() {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    message: format!("entries[{i}] ({}): field `frames` is empty", e.key()),
                });
            }
            if !seen.insert(e.key()) {
                return Err(Error::DuplicateSequence(e.key()));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, frame: &Path) -> PathBuf {
        if frame.is_absolute() {
            frame.to_path_buf()
        } else {
            self.root.join(frame)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SequenceRecord> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Sorted distinct subject ids of one split.
    pub fn subjects(&self, split: Split) -> Vec<String> {
        let set: BTreeSet<&str> = self.split(split).map(|e| e.subject_id.as_str()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, SplitCounts> {
        let mut out: BTreeMap<Split, (BTreeSet<&str>, SplitCounts)> = BTreeMap::new();
        for e in &self.entries {
            let (ids, c) = out.entry(e.split).or_default();
            ids.insert(&e.subject_id);
            c.sequences += 1;
            c.conditions.insert(e.condition.clone());
        }
        out.into_iter()
            .map(|(s, (ids, mut c))| {
                c.identities = ids.len();
                (s, c)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Reads and validates a manifest. Unless `lazy`, every frame file must
/// exist.
pub fn load_manifest(path: &Path, lazy: bool) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        message: format!("line {} column {}: {e}", e.line(), e.column()),
    })?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate(path)?;
    if !lazy {
        for e in &m.entries {
            if let Some(missing) = e.frame_paths.iter().find(|f| !m.resolve(f).exists()) {
                return Err(Error::Manifest {
                    path: path.to_path_buf(),
                    message: format!(
                        "{}: frame {} does not exist (load lazily to defer)",
                        e.key(),
                        missing.display()
                    ),
                });
            }
        }
    }
    Ok(m)
}
