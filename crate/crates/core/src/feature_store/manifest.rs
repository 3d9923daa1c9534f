//! JSON-lines manifest: one record per tracklet.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::hfv1;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub path: PathBuf,
    pub subject_id: u32,
    pub tracklet_id: u32,
    #[serde(default)]
    pub clothes_id: Option<u32>,
    pub camera_id: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<Record>,
    /// Directory relative record paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(records: Vec<Record>, root: impl Into<PathBuf>) -> Self {
        Self {
            records,
            root: root.into(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: Record = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("line {}: {e}", line_no + 1),
            })?;
            records.push(record);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { records, root })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &Record) -> PathBuf {
        if record.path.is_absolute() {
            record.path.clone()
        } else {
            self.root.join(&record.path)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = (usize, &Record)> {
        self.records.iter().enumerate().filter(move |(_, r)| r.split == split)
    }

    /// Train-split record indices grouped by subject, in subject order.
    pub fn train_by_subject(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.split(Split::Train) {
            map.entry(r.subject_id).or_default().push(i);
        }
        map
    }

    /// Structural checks that need no file access.
    pub fn validate_records(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.path) {
                return Err(Error::Metadata(format!("duplicate manifest path {}", r.path.display())));
            }
        }
        for (subject, tracklets) in self.train_by_subject() {
            if tracklets.len() < 2 {
                return Err(Error::Metadata(format!(
                    "training subject {subject} has {} tracklet(s), needs at least 2",
                    tracklets.len()
                )));
            }
        }
        Ok(())
    }

    /// Full validation: structure plus every referenced file parsing.
    pub fn validate(&self) -> Result<()> {
        self.validate_records()?;
        for r in &self.records {
            hfv1::read_tensor(&self.resolve(r))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(path: &str, subject: u32, split: Split) -> Record {
        Record {
            path: path.into(),
            subject_id: subject,
            tracklet_id: 0,
            clothes_id: Some(0),
            camera_id: 0,
            split,
        }
    }

    #[test]
    fn record_json_field_names() {
        let line = serde_json::to_string(&rec("a.hfv1", 3, Split::Gallery)).unwrap();
        assert_eq!(
            line,
            r#"{"path":"a.hfv1","subject_id":3,"tracklet_id":0,"clothes_id":0,"camera_id":0,"split":"gallery"}"#
        );
    }

    #[test]
    fn unknown_fields_rejected() {
        let bad = r#"{"path":"a","subject_id":1,"tracklet_id":0,"camera_id":0,"split":"train","x":1}"#;
        assert!(serde_json::from_str::<Record>(bad).is_err());
    }

    #[test]
    fn duplicate_paths_rejected() {
        let m = Manifest::new(vec![rec("a", 0, Split::Train), rec("a", 0, Split::Train)], ".");
        assert!(matches!(m.validate_records(), Err(Error::Metadata(_))));
    }

    #[test]
    fn lone_training_tracklet_rejected() {
        let m = Manifest::new(
            vec![
                rec("a", 0, Split::Train),
                rec("b", 0, Split::Train),
                rec("c", 1, Split::Train),
            ],
            ".",
        );
        assert!(m.validate_records().is_err());
    }
}
