//! Line-oriented dataset manifest: one JSON object per sample.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorruptionModel;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub split: String,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub rgb: String,
    pub gt_depth: String,
    pub pred_depth: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rgb2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_depth2: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pred_depth2: Option<String>,
    pub corruption: Vec<CorruptionModel>,
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: format!("{}:{}", path.display(), n + 1),
            reason: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(records)
}
