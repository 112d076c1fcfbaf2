use std::cmp::Ordering;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::lm::{NGramLM, END_OF_SENTENCE, START_OF_SENTENCE};
use crate::alphabet::Alphabet;
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::numeric::log_add;
use crate::scalar::Scalar;

pub const PAPER_BEAM_WIDTH: usize = 8192;
pub const DESK_BEAM_WIDTH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    /// Weight of the LM log-probability of each completed word.
    pub lm_weight: f64,
    /// Constant added per completed word when an LM is used.
    pub word_bonus: f64,
    /// Extensions by symbols whose frame log-probability is below this floor
    /// are skipped. `None` keeps every extension.
    pub prune_logp: Option<f64>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            width: DESK_BEAM_WIDTH,
            lm_weight: 0.5,
            word_bonus: 1.0,
            prune_logp: None,
        }
    }
}

impl BeamConfig {
    pub fn with_width(width: usize) -> Self {
        BeamConfig {
            width,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::Config("beam width must be at least 1".into()));
        }
        if !(self.lm_weight >= 0.0) || !self.word_bonus.is_finite() {
            return Err(Error::Config("lm weight must be >= 0 and word bonus finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub labels: Vec<usize>,
    pub transcript: String,
    /// Acoustic log-probability plus the fused LM terms.
    pub score: f64,
    /// `log p(labels | grid)` accumulated over the surviving paths.
    pub acoustic_logp: f64,
    pub lm_score: f64,
}

#[derive(Clone, Copy, Debug)]
struct Hyp {
    blank: f64,
    non_blank: f64,
    lm: f64,
}

impl Hyp {
    fn acoustic(&self) -> f64 {
        log_add(self.blank, self.non_blank)
    }
}

struct Fusion<'a> {
    lm: &'a NGramLM,
    space: usize,
    weight: f64,
    bonus: f64,
}

impl Fusion<'_> {
    fn words(&self, labels: &[usize], alphabet: &Alphabet) -> Vec<String> {
        labels
            .split(|&l| l == self.space)
            .filter(|w| !w.is_empty())
            .map(|w| alphabet.render(w).expect("labels come from the grid"))
            .collect()
    }

    fn word_term(&self, word: &str, history: &[String]) -> f64 {
        let mut context = vec![START_OF_SENTENCE.to_owned()];
        context.extend_from_slice(history);
        self.weight * self.lm.log_prob(word, &context) + self.bonus
    }

    /// LM term for the word a space just closed, if it closed one.
    fn on_space(&self, prefix: &[usize], alphabet: &Alphabet) -> f64 {
        if prefix.last().is_none_or(|&l| l == self.space) {
            return 0.0;
        }
        let words = self.words(prefix, alphabet);
        let (last, history) = words.split_last().expect("prefix ends inside a word");
        self.word_term(last, history)
    }

    /// LM terms owed at the end of the utterance: the trailing partial word
    /// and the sentence end marker.
    fn on_end(&self, prefix: &[usize], alphabet: &Alphabet) -> f64 {
        let words = self.words(prefix, alphabet);
        let mut term = 0.0;
        if prefix.last().is_some_and(|&l| l != self.space) {
            let (last, history) = words.split_last().expect("prefix ends inside a word");
            term += self.word_term(last, history);
        }
        let mut context = vec![START_OF_SENTENCE.to_owned()];
        context.extend(words);
        term + self.weight * self.lm.log_prob(END_OF_SENTENCE, &context)
    }
}

// Best first; equal scores fall back to lexicographic prefix order.
fn rank(a: &(Vec<usize>, f64), b: &(Vec<usize>, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(&b.0))
}

/// CTC prefix beam search. Each prefix tracks the probability of ending in a
/// blank and in a non-blank; with an LM every word closed by a space (and the
/// final word) adds `lm_weight * log p(word | history) + word_bonus`.
pub fn beam_search<S: Scalar>(
    grid: &PosteriorGrid<S>,
    alphabet: &Alphabet,
    cfg: &BeamConfig,
    lm: Option<&NGramLM>,
) -> Result<BeamResult> {
    cfg.validate()?;
    if grid.num_symbols() != alphabet.num_symbols() {
        return Err(Error::ShapeMismatch(format!(
            "grid has {} symbols, alphabet has {}",
            grid.num_symbols(),
            alphabet.num_symbols()
        )));
    }
    let fusion = match lm {
        Some(lm) => Some(Fusion {
            lm,
            space: alphabet
                .space_id()
                .ok_or_else(|| Error::Config("language model fusion needs a space grapheme".into()))?,
            weight: cfg.lm_weight,
            bonus: cfg.word_bonus,
        }),
        None => None,
    };
    let blank = grid.blank_id();
    let neg_inf = f64::NEG_INFINITY;

    let mut beam: Vec<(Vec<usize>, Hyp)> = vec![(
        Vec::new(),
        Hyp {
            blank: 0.0,
            non_blank: neg_inf,
            lm: 0.0,
        },
    )];

    for t in 0..grid.frames() {
        let frame: Vec<f64> = grid.log_probs().row(t).iter().map(|v| v.to_f64_lossy()).collect();
        let mut next: HashMap<Vec<usize>, Hyp> = HashMap::with_capacity(beam.len() * 4);

        for (prefix, hyp) in &beam {
            let total = hyp.acoustic();
            let last = prefix.last().copied();

            let stay = next.entry(prefix.clone()).or_insert(Hyp {
                blank: neg_inf,
                non_blank: neg_inf,
                lm: hyp.lm,
            });
            stay.blank = log_add(stay.blank, total + frame[blank]);
            if let Some(l) = last {
                stay.non_blank = log_add(stay.non_blank, hyp.non_blank + frame[l]);
            }

            for (symbol, &lp) in frame.iter().enumerate() {
                if symbol == blank || lp == neg_inf {
                    continue;
                }
                if cfg.prune_logp.is_some_and(|floor| lp < floor) {
                    continue;
                }
                // a repeat only extends the prefix when separated by a blank
                let from = if Some(symbol) == last { hyp.blank } else { total };
                if from == neg_inf {
                    continue;
                }
                let mut extended = prefix.clone();
                extended.push(symbol);
                let ext = next.entry(extended).or_insert_with_key(|k| {
                    let added = match &fusion {
                        Some(f) if symbol == f.space => f.on_space(&k[..k.len() - 1], alphabet),
                        _ => 0.0,
                    };
                    Hyp {
                        blank: neg_inf,
                        non_blank: neg_inf,
                        lm: hyp.lm + added,
                    }
                });
                ext.non_blank = log_add(ext.non_blank, from + lp);
            }
        }

        let mut ranked: Vec<(Vec<usize>, f64)> = next
            .iter()
            .map(|(k, h)| (k.clone(), h.acoustic() + h.lm))
            .filter(|(_, s)| *s > neg_inf)
            .collect();
        ranked.sort_by(rank);
        ranked.truncate(cfg.width);
        beam = ranked
            .into_iter()
            .map(|(k, _)| {
                let h = next[&k];
                (k, h)
            })
            .collect();
    }

    let mut finals: Vec<(Vec<usize>, f64, f64, f64)> = beam
        .into_iter()
        .map(|(prefix, hyp)| {
            let end = fusion.as_ref().map_or(0.0, |f| f.on_end(&prefix, alphabet));
            let acoustic = hyp.acoustic();
            let lm_score = hyp.lm + end;
            (prefix, acoustic + lm_score, acoustic, lm_score)
        })
        .collect();
    finals.sort_by(|a, b| rank(&(a.0.clone(), a.1), &(b.0.clone(), b.1)));
    let (labels, score, acoustic_logp, lm_score) =
        finals.into_iter().next().unwrap_or((Vec::new(), neg_inf, neg_inf, 0.0));
    let transcript = alphabet.render(&labels)?;
    Ok(BeamResult {
        labels,
        transcript,
        score,
        acoustic_logp,
        lm_score,
    })
}
