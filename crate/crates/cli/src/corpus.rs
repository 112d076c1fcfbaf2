//! Manifest-backed corpora on disk.

use std::path::{Path, PathBuf};

use anyhow::Context;
use rayon::prelude::*;
use xmodal_core::eval::{read_manifest, write_manifest, ManifestRecord};
use xmodal_core::teacher::{
    read_features, read_posteriors, write_features, write_posteriors, Utterance, FEATURES_EXTENSION,
    POSTERIORS_EXTENSION,
};
use xmodal_core::Alphabet;

pub const ALPHABET_FILE: &str = "alphabet.txt";
pub const LEXICON_FILE: &str = "words.txt";
pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const DEV_MANIFEST: &str = "dev.jsonl";

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads every utterance of a manifest, loading features and posteriors
/// from the paths it lists (relative to the manifest's directory).
pub fn load_utterances(manifest: &Path) -> anyhow::Result<Vec<Utterance>> {
    let records = read_manifest(manifest)?;
    let base = manifest_dir(manifest);
    records
        .par_iter()
        .map(|r| {
            let features_path = r
                .features_path
                .as_deref()
                .ok_or_else(|| anyhow::anyhow!("{}: utterance {} has no features_path", manifest.display(), r.id))?;
            let features = read_features(&ManifestRecord::resolve(&base, features_path))?;
            let teacher_posteriors = match &r.posteriors_path {
                Some(p) => Some(read_posteriors(&ManifestRecord::resolve(&base, p))?),
                None => None,
            };
            Ok(Utterance {
                id: r.id.clone(),
                features,
                teacher_posteriors,
                transcript_gt: r.transcript_gt.clone(),
                transcript_asr: r.transcript_asr.clone(),
                transcript_asr2: r.transcript_asr2.clone(),
            })
        })
        .collect()
}

/// The alphabet from `explicit`, else `alphabet.txt` beside the manifest,
/// else `fallback`.
pub fn resolve_alphabet(explicit: Option<&Path>, manifest: &Path, fallback: &Alphabet) -> anyhow::Result<Alphabet> {
    if let Some(p) = explicit {
        return Ok(Alphabet::load(p)?);
    }
    let beside = manifest_dir(manifest).join(ALPHABET_FILE);
    if beside.is_file() {
        return Ok(Alphabet::load(&beside)?);
    }
    Ok(fallback.clone())
}

/// Writes features and posteriors under `out` and returns the manifest
/// records pointing at them.
pub fn write_utterances(out: &Path, utterances: &[Utterance]) -> anyhow::Result<Vec<ManifestRecord>> {
    let features_dir = out.join("features");
    let posteriors_dir = out.join("posteriors");
    for dir in [&features_dir, &posteriors_dir] {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    utterances
        .par_iter()
        .map(|u| {
            let features_path = format!("features/{}.{FEATURES_EXTENSION}", u.id);
            write_features(&u.features, &out.join(&features_path))?;
            let posteriors_path = match &u.teacher_posteriors {
                Some(grid) => {
                    let p = format!("posteriors/{}.{POSTERIORS_EXTENSION}", u.id);
                    write_posteriors(grid, &out.join(&p))?;
                    Some(p)
                }
                None => None,
            };
            Ok(ManifestRecord {
                id: u.id.clone(),
                features_path: Some(features_path),
                posteriors_path,
                transcript_gt: u.transcript_gt.clone(),
                transcript_asr: u.transcript_asr.clone(),
                transcript_asr2: u.transcript_asr2.clone(),
                ..Default::default()
            })
        })
        .collect()
}

/// Copies records into a manifest at `dest`, rewriting relative paths so
/// they still resolve from the new location.
pub fn write_relocated(dest: &Path, source_manifest: &Path, records: &[ManifestRecord]) -> anyhow::Result<()> {
    let base = manifest_dir(source_manifest);
    let base = if base.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        base
    };
    let base = base
        .canonicalize()
        .with_context(|| format!("resolving {}", base.display()))?;
    let fix = |p: &Option<String>| {
        p.as_deref()
            .map(|p| ManifestRecord::resolve(&base, p).display().to_string())
    };
    let moved: Vec<ManifestRecord> = records
        .iter()
        .map(|r| ManifestRecord {
            features_path: fix(&r.features_path),
            posteriors_path: fix(&r.posteriors_path),
            ..r.clone()
        })
        .collect();
    Ok(write_manifest(dest, &moved)?)
}
