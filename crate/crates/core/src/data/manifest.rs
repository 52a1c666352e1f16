//! JSON-lines manifest describing where clips live and what they are.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(config_err!("unknown split '{other}' (expected train, val or test)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Secret,
    Cover,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    #[serde(default)]
    pub label: usize,
    pub split: Split,
    pub role: Role,
    /// Optional multi-hot attribute vector for privacy metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attrs: Option<Vec<u8>>,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line).map_err(|e| Error::data(path, format!("line {}: {e}", i + 1)))?;
            records.push(r);
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = Self { root, records };
        m.check_cover_disjoint().map_err(|e| Error::data(path, e))?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::data(path, e))?;
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| Error::data(path, e))?;
            writeln!(f, "{line}")?;
        }
        Ok(())
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        if r.path.is_absolute() {
            r.path.clone()
        } else {
            self.root.join(&r.path)
        }
    }

    pub fn select(&self, split: Split, role: Role) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split && r.role == role)
    }

    /// The training cover pool must not share a video with evaluation pools.
    pub fn check_cover_disjoint(&self) -> std::result::Result<(), String> {
        let train: BTreeSet<&Path> = self.select(Split::Train, Role::Cover).map(|r| r.path.as_path()).collect();
        for r in self.records.iter().filter(|r| r.role == Role::Cover && r.split != Split::Train) {
            if train.contains(r.path.as_path()) {
                return Err(format!("cover {} appears in both train and {} pools", r.path.display(), r.split));
            }
        }
        Ok(())
    }
}
