use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One utterance in a JSON Lines manifest. Unrecognized fields are carried
/// through untouched so filtered manifests keep their layout.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    #[serde(default)]
    pub features_path: Option<String>,
    #[serde(default)]
    pub posteriors_path: Option<String>,
    #[serde(default)]
    pub transcript_gt: Option<String>,
    #[serde(default)]
    pub transcript_asr: Option<String>,
    #[serde(default)]
    pub transcript_asr2: Option<String>,
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl ManifestRecord {
    /// Resolves a path field against the manifest's directory.
    pub fn resolve(base: &Path, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        if record.id.is_empty() {
            return Err(Error::Manifest {
                line: i + 1,
                message: "empty id".into(),
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for record in records {
        serde_json::to_writer(&mut out, record).expect("manifest records serialize");
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}
