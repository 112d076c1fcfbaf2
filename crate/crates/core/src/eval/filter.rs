use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::manifest::ManifestRecord;
use super::wer::wer_str;
use crate::error::{Error, Result};

/// Keep an utterance only if at least this fraction of its long words are
/// dictionary words (inclusive).
pub const DEFAULT_MIN_VALID_RATIO: f64 = 0.90;
/// Keep an utterance only if the two transcriptions disagree by strictly
/// less than this WER.
pub const DEFAULT_MAX_AGREEMENT_WER: f64 = 0.28;
pub const MIN_QUALIFYING_WORD_CHARS: usize = 4;

/// Fraction of words with at least four characters that are in
/// `dictionary`. Counts token occurrences; zero when no word qualifies.
pub fn valid_word_ratio(transcript: &str, dictionary: &HashSet<String>) -> f64 {
    let mut qualifying = 0usize;
    let mut valid = 0usize;
    for word in transcript.split_whitespace() {
        if word.chars().count() < MIN_QUALIFYING_WORD_CHARS {
            continue;
        }
        qualifying += 1;
        if dictionary.contains(&word.to_lowercase()) {
            valid += 1;
        }
    }
    if qualifying == 0 {
        0.0
    } else {
        valid as f64 / qualifying as f64
    }
}

#[inline]
pub fn passes_valid_words(ratio: f64, min_ratio: f64) -> bool {
    ratio >= min_ratio
}

#[inline]
pub fn passes_agreement(agreement_wer: f64, max_wer: f64) -> bool {
    agreement_wer < max_wer
}

/// WER of `secondary` against the teacher's `primary` transcript, compared
/// strictly against `threshold`.
pub fn agreement_keep(primary: &str, secondary: &str, threshold: f64) -> Result<bool> {
    Ok(passes_agreement(wer_str(primary, secondary)?.wer, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterThresholds {
    pub min_valid_ratio: f64,
    pub max_agreement_wer: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        FilterThresholds {
            min_valid_ratio: DEFAULT_MIN_VALID_RATIO,
            max_agreement_wer: DEFAULT_MAX_AGREEMENT_WER,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rejection {
    ValidWords,
    Agreement,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub id: String,
    pub valid_word_ratio: f64,
    /// Absent when the teacher transcript is empty.
    pub agreement_wer: Option<f64>,
    pub kept: bool,
    pub rejection: Option<Rejection>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub decisions: Vec<FilterDecision>,
    pub kept: usize,
    pub discarded: usize,
}

impl FilterReport {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for d in &self.decisions {
            out.push_str(&serde_json::to_string(d).expect("decisions serialize"));
            out.push('\n');
        }
        out
    }

    pub fn summary(&self, thresholds: &FilterThresholds) -> String {
        let total = self.kept + self.discarded;
        let count = |r| self.decisions.iter().filter(|d| d.rejection == Some(r)).count();
        let mut s = String::new();
        let _ = writeln!(s, "utterances:            {total}");
        let _ = writeln!(
            s,
            "rejected (valid words < {:.2}): {}",
            thresholds.min_valid_ratio,
            count(Rejection::ValidWords)
        );
        let _ = writeln!(
            s,
            "rejected (agreement WER >= {:.2}): {}",
            thresholds.max_agreement_wer,
            count(Rejection::Agreement)
        );
        let _ = writeln!(s, "kept:                  {}", self.kept);
        s
    }
}

fn decide(
    line: usize,
    record: &ManifestRecord,
    dictionary: &HashSet<String>,
    thresholds: &FilterThresholds,
) -> Result<FilterDecision> {
    let missing = |field: &str| Error::Manifest {
        line,
        message: format!("utterance {} has no {field}", record.id),
    };
    let primary = record
        .transcript_asr
        .as_deref()
        .ok_or_else(|| missing("transcript_asr"))?;
    let secondary = record
        .transcript_asr2
        .as_deref()
        .ok_or_else(|| missing("transcript_asr2"))?;

    let ratio = valid_word_ratio(primary, dictionary);
    let agreement_wer = wer_str(primary, secondary).ok().map(|b| b.wer);
    let rejection = if !passes_valid_words(ratio, thresholds.min_valid_ratio) {
        Some(Rejection::ValidWords)
    } else if !agreement_wer.is_some_and(|w| passes_agreement(w, thresholds.max_agreement_wer)) {
        Some(Rejection::Agreement)
    } else {
        None
    };
    Ok(FilterDecision {
        id: record.id.clone(),
        valid_word_ratio: ratio,
        agreement_wer,
        kept: rejection.is_none(),
        rejection,
    })
}

/// Valid-word gate, then teacher/secondary agreement gate, per record.
pub fn filter_corpus(
    records: &[ManifestRecord],
    dictionary: &HashSet<String>,
    thresholds: &FilterThresholds,
) -> Result<(FilterReport, Vec<ManifestRecord>)> {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (i, record) in records.iter().enumerate() {
        let decision = decide(i + 1, record, dictionary, thresholds)?;
        if decision.kept {
            report.kept += 1;
            kept.push(record.clone());
        } else {
            report.discarded += 1;
        }
        report.decisions.push(decision);
    }
    Ok((report, kept))
}
