use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Word-level Levenshtein alignment with unit costs. Among minimal
/// alignments the backtrace prefers substitutions, then deletions.
pub fn wer<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> Result<WerBreakdown> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    let n = reference.len();
    let m = hypothesis.len();
    let width = m + 1;
    let mut cost = vec![0usize; (n + 1) * width];
    for i in 0..=n {
        cost[i * width] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            let diag = cost[(i - 1) * width + j - 1] + usize::from(!same);
            let del = cost[(i - 1) * width + j] + 1;
            let ins = cost[i * width + j - 1] + 1;
            cost[i * width + j] = diag.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (n, m);
    let mut out = WerBreakdown {
        ref_words: n,
        ..Default::default()
    };
    while i > 0 || j > 0 {
        let here = cost[i * width + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1].as_ref() == hypothesis[j - 1].as_ref();
            if here == cost[(i - 1) * width + j - 1] + usize::from(!same) {
                out.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && here == cost[(i - 1) * width + j] + 1 {
            out.deletions += 1;
            i -= 1;
        } else {
            out.insertions += 1;
            j -= 1;
        }
    }
    out.wer = out.errors() as f64 / n as f64;
    Ok(out)
}

/// [`wer`] over whitespace-separated words.
pub fn wer_str(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    wer(&r, &h)
}

/// Pooled WER over many utterances: total errors over total reference words.
/// Pairs with an empty reference contribute their insertions only.
pub fn corpus_wer<'a, I>(pairs: I) -> WerBreakdown
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut total = WerBreakdown::default();
    for (reference, hypothesis) in pairs {
        match wer_str(reference, hypothesis) {
            Ok(b) => {
                total.substitutions += b.substitutions;
                total.insertions += b.insertions;
                total.deletions += b.deletions;
                total.ref_words += b.ref_words;
            }
            Err(_) => total.insertions += hypothesis.split_whitespace().count(),
        }
    }
    total.wer = if total.ref_words == 0 {
        if total.insertions == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        total.errors() as f64 / total.ref_words as f64
    };
    total
}

/// Minimal edit cost found by exploring every edit script recursively with
/// no memoization. Exponential; test oracle for sequences of a handful of
/// words.
pub fn brute_force_edit_cost<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> usize {
    match (reference.split_first(), hypothesis.split_first()) {
        (None, _) => hypothesis.len(),
        (_, None) => reference.len(),
        (Some((r, r_rest)), Some((h, h_rest))) => {
            let keep_or_sub = usize::from(r.as_ref() != h.as_ref()) + brute_force_edit_cost(r_rest, h_rest);
            let delete = 1 + brute_force_edit_cost(r_rest, hypothesis);
            let insert = 1 + brute_force_edit_cost(reference, h_rest);
            keep_or_sub.min(delete).min(insert)
        }
    }
}
