//! Line-delimited dataset manifest: one header line, then one record per line.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image_ops::{ChannelStats, DegradationSpec};
use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub hr_size: usize,
    #[serde(default)]
    pub lr_size: Option<usize>,
    pub hr_root: PathBuf,
    #[serde(default)]
    pub lr_root: Option<PathBuf>,
    /// Computed on the training split of the high-resolution images.
    #[serde(default)]
    pub normalization: Option<ChannelStats>,
    #[serde(default)]
    pub degradation: Option<DegradationSpec>,
    /// Free-form echo of the command and configuration that produced this file.
    #[serde(default)]
    pub provenance: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Relative to `hr_root`.
    pub relative_path: String,
    pub label_index: usize,
    pub split: Split,
    /// Relative to `lr_root`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_relative_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        if h.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "manifest schema version {} is not supported (expected {MANIFEST_SCHEMA_VERSION})",
                h.schema_version
            )));
        }
        if h.class_names.len() < 2 {
            return Err(Error::Dataset(format!("manifest lists {} classes", h.class_names.len())));
        }
        if h.hr_size == 0 {
            return Err(Error::Dataset("hr_size must be at least 1".into()));
        }
        if let Some(lr) = h.lr_size {
            if lr == 0 || lr >= h.hr_size {
                return Err(Error::Dataset(format!("lr_size {lr} must lie in [1, hr_size = {})", h.hr_size)));
            }
        }
        if self.records.is_empty() {
            return Err(Error::Dataset("manifest has no records".into()));
        }
        for r in &self.records {
            if r.label_index >= h.class_names.len() {
                return Err(Error::Dataset(format!(
                    "{}: label {} out of range for {} classes",
                    r.relative_path,
                    r.label_index,
                    h.class_names.len()
                )));
            }
            if r.lr_relative_path.is_some() && h.lr_root.is_none() {
                return Err(Error::Dataset(format!("{}: low-resolution path without lr_root", r.relative_path)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.header.class_names.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn hr_path(&self, record: &ManifestRecord) -> PathBuf {
        self.header.hr_root.join(&record.relative_path)
    }

    pub fn lr_path(&self, record: &ManifestRecord) -> Option<PathBuf> {
        Some(self.header.lr_root.as_ref()?.join(record.lr_relative_path.as_ref()?))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let text = self.to_jsonl()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines().enumerate();
        let parse_err = |line: usize, e: serde_json::Error| {
            Error::Dataset(format!("{}:{}: {e}", path.display(), line + 1))
        };
        let header = match lines.next() {
            Some((i, line)) => serde_json::from_str(&line.map_err(|e| Error::io(path, e))?).map_err(|e| parse_err(i, e))?,
            None => return Err(Error::Dataset(format!("{}: empty manifest", path.display()))),
        };
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| parse_err(i, e))?);
        }
        let m = DatasetManifest { header, records };
        m.validate()?;
        Ok(m)
    }
}
