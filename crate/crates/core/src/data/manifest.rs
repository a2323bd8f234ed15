//! Train/val/test assignment and its plain-text manifest.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::binio::write_atomic;
use crate::error::{Result, RetoError};
use crate::rng::stream_rng;

pub const MANIFEST_FILE: &str = "manifest.tsv";
const HEADER: &str = "# RSMP manifest v1";
const PROVENANCE: &str = "# stats_provenance train";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = RetoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(RetoError::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub sample_id: String,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

/// Shuffles ids with `seed`, then assigns contiguous runs by `ratios` (train, val, test).
///
/// Counts are `floor(ratio * n)` for train and val; test takes the remainder.
pub fn make_splits<S: AsRef<str>>(sample_ids: &[S], ratios: [f64; 3], seed: u64) -> Result<Vec<(String, Split)>> {
    if sample_ids.is_empty() {
        return Err(RetoError::EmptyDataset);
    }
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(RetoError::Config(format!("split ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let n = sample_ids.len();
    let n_train = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let n_val = ((ratios[1] * n as f64 + 1e-9).floor() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "splits"));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(rank, i)| {
            let split = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (sample_ids[i].as_ref().to_string(), split)
        })
        .collect())
}

impl DatasetManifest {
    pub fn ids(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.ids(split).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{HEADER}\n{PROVENANCE}\n");
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.sample_id, e.path.display(), e.split));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(RetoError::Format {
                offset: 0,
                reason: format!("manifest must start with `{HEADER}`"),
            });
        }
        let mut entries = Vec::new();
        for (no, line) in lines.enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 {
                return Err(RetoError::Config(format!("manifest line {}: expected 3 tab-separated fields", no + 2)));
            }
            entries.push(ManifestEntry {
                sample_id: parts[0].to_string(),
                path: PathBuf::from(parts[1]),
                split: parts[2].parse()?,
            });
        }
        for (i, e) in entries.iter().enumerate() {
            if entries[..i].iter().any(|o| o.sample_id == e.sample_id) {
                return Err(RetoError::Config(format!("sample `{}` listed twice", e.sample_id)));
            }
        }
        Ok(Self { entries })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), self.to_text().as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)
    }
}
