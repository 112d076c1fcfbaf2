//! Word error rate and the two-stage corpus filter.

mod filter;
mod manifest;
mod wer;

pub use filter::{
    agreement_keep, filter_corpus, passes_agreement, passes_valid_words, valid_word_ratio, FilterDecision,
    FilterReport, FilterThresholds, Rejection, DEFAULT_MAX_AGREEMENT_WER, DEFAULT_MIN_VALID_RATIO,
    MIN_QUALIFYING_WORD_CHARS,
};
pub use manifest::{read_manifest, write_manifest, ManifestRecord};
pub use wer::{brute_force_edit_cost, corpus_wer, wer, wer_str, WerBreakdown};
