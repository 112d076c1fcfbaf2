//! Word n-gram model with stupid-backoff scores, renormalized per context so
//! that conditional probabilities over the vocabulary sum to one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_LM_ORDER: usize = 6;
pub const START_OF_SENTENCE: &str = "<s>";
pub const END_OF_SENTENCE: &str = "</s>";

const HEADER: &str = "# xmodal-ngram";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NGramConfig {
    pub order: usize,
    /// Multiplier applied each time scoring falls back to a shorter context.
    pub backoff: f64,
    /// Log-probability charged for a word outside the vocabulary.
    pub unk_log_penalty: f64,
}

impl Default for NGramConfig {
    fn default() -> Self {
        NGramConfig {
            order: DEFAULT_LM_ORDER,
            backoff: 0.4,
            unk_log_penalty: -10.0,
        }
    }
}

impl NGramConfig {
    fn validate(&self) -> Result<()> {
        if self.order == 0 {
            return Err(Error::Config("n-gram order must be at least 1".into()));
        }
        if !(self.backoff > 0.0 && self.backoff <= 1.0) {
            return Err(Error::Config(format!("backoff factor {} not in (0, 1]", self.backoff)));
        }
        if !self.unk_log_penalty.is_finite() || self.unk_log_penalty > 0.0 {
            return Err(Error::Config(
                "unknown-word penalty must be a finite log-probability".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct NGramLM {
    config: NGramConfig,
    /// Natural log of the relative frequency `count(ngram) / count(context *)`.
    rel: HashMap<Vec<String>, f64>,
    /// Observed successors of every context of length >= 1.
    successors: HashMap<Vec<String>, Vec<String>>,
    /// Sum of unnormalized backoff scores over the vocabulary, per observed context.
    totals: HashMap<Vec<String>, f64>,
    /// Prediction vocabulary, `</s>` included and `<s>` excluded.
    vocab: Vec<String>,
}

impl NGramLM {
    /// Counts n-grams of every order up to `config.order` over whitespace
    /// tokenized lines padded with sentence markers.
    pub fn train<I, L>(lines: I, config: NGramConfig) -> Result<Self>
    where
        I: IntoIterator<Item = L>,
        L: AsRef<str>,
    {
        config.validate()?;
        let mut counts: HashMap<Vec<String>, u64> = HashMap::new();
        let mut any = false;
        for line in lines {
            let words: Vec<&str> = line.as_ref().split_whitespace().collect();
            if words.is_empty() {
                continue;
            }
            any = true;
            let tokens: Vec<String> = std::iter::once(START_OF_SENTENCE)
                .chain(words.iter().copied())
                .chain(std::iter::once(END_OF_SENTENCE))
                .map(str::to_owned)
                .collect();
            for end in 1..tokens.len() {
                for n in 1..=config.order.min(end + 1) {
                    *counts.entry(tokens[end + 1 - n..=end].to_vec()).or_default() += 1;
                }
            }
        }
        if !any {
            return Err(Error::EmptyCorpus);
        }

        let mut context_totals: HashMap<Vec<String>, u64> = HashMap::new();
        for (gram, &c) in &counts {
            *context_totals.entry(gram[..gram.len() - 1].to_vec()).or_default() += c;
        }
        let rel = counts
            .iter()
            .map(|(gram, &c)| {
                let denom = context_totals[&gram[..gram.len() - 1]];
                (gram.clone(), (c as f64 / denom as f64).ln())
            })
            .collect();
        Ok(Self::from_relative(config, rel))
    }

    fn from_relative(config: NGramConfig, rel: HashMap<Vec<String>, f64>) -> Self {
        let mut successors: HashMap<Vec<String>, Vec<String>> = HashMap::new();
        let mut vocab = BTreeSet::new();
        for gram in rel.keys() {
            let (word, context) = gram.split_last().expect("n-grams are nonempty");
            if context.is_empty() {
                vocab.insert(word.clone());
            } else {
                successors.entry(context.to_vec()).or_default().push(word.clone());
            }
        }
        for list in successors.values_mut() {
            list.sort();
        }
        let mut lm = NGramLM {
            config,
            rel,
            successors,
            totals: HashMap::new(),
            vocab: vocab.into_iter().collect(),
        };

        // unigram relative frequencies already sum to one
        lm.totals
            .insert(Vec::new(), lm.vocab.iter().map(|w| lm.raw_score(w, &[])).sum());
        let mut contexts: Vec<Vec<String>> = lm.successors.keys().cloned().collect();
        contexts.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        for context in contexts {
            let shorter = &context[1..];
            let shorter_total = lm.raw_total(shorter);
            let mut seen = 0.0;
            let mut seen_backed_off = 0.0;
            for word in &lm.successors[&context] {
                seen += lm.relative(&context, word).exp();
                seen_backed_off += lm.raw_score(word, shorter);
            }
            let total = seen + lm.config.backoff * (shorter_total - seen_backed_off);
            lm.totals.insert(context, total);
        }
        lm
    }

    pub fn config(&self) -> &NGramConfig {
        &self.config
    }

    pub fn order(&self) -> usize {
        self.config.order
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn contains(&self, word: &str) -> bool {
        self.vocab.binary_search_by(|w| w.as_str().cmp(word)).is_ok()
    }

    fn relative(&self, context: &[String], word: &str) -> f64 {
        let mut gram = context.to_vec();
        gram.push(word.to_owned());
        self.rel.get(&gram).copied().unwrap_or(f64::NEG_INFINITY)
    }

    fn raw_score(&self, word: &str, context: &[String]) -> f64 {
        let mut factor = 1.0;
        for start in 0..=context.len() {
            let lp = self.relative(&context[start..], word);
            if lp > f64::NEG_INFINITY {
                return factor * lp.exp();
            }
            factor *= self.config.backoff;
        }
        0.0
    }

    fn raw_total(&self, context: &[String]) -> f64 {
        let mut factor = 1.0;
        for start in 0..=context.len() {
            if let Some(total) = self.totals.get(&context[start..]) {
                return factor * total;
            }
            factor *= self.config.backoff;
        }
        unreachable!("the empty context always has a total")
    }

    fn effective_context<'a>(&self, context: &'a [String]) -> &'a [String] {
        let keep = context.len().min(self.config.order - 1);
        &context[context.len() - keep..]
    }

    /// Unnormalized stupid-backoff score `S(word | context)`: the relative
    /// frequency at the longest matching order, times `backoff` per step
    /// down. Zero for out-of-vocabulary words.
    pub fn score(&self, word: &str, context: &[String]) -> f64 {
        self.raw_score(word, self.effective_context(context))
    }

    /// Normalized conditional log-probability. Out-of-vocabulary words get
    /// the configured penalty instead.
    pub fn log_prob(&self, word: &str, context: &[String]) -> f64 {
        if word == START_OF_SENTENCE || !self.contains(word) {
            return self.config.unk_log_penalty;
        }
        let context = self.effective_context(context);
        (self.raw_score(word, context) / self.raw_total(context)).ln()
    }

    /// Log-probability of a whole sentence including the end marker.
    pub fn sentence_log_prob(&self, words: &[&str]) -> f64 {
        let mut context = vec![START_OF_SENTENCE.to_owned()];
        let mut total = 0.0;
        for word in words.iter().copied().chain(std::iter::once(END_OF_SENTENCE)) {
            total += self.log_prob(word, &context);
            context.push(word.to_owned());
        }
        total
    }

    /// Every context that has at least one observed successor.
    pub fn observed_contexts(&self) -> impl Iterator<Item = &[String]> {
        self.successors.keys().map(Vec::as_slice)
    }

    /// Text form: header comment, then one `logp<TAB>tokens<TAB>backoff`
    /// line per n-gram sorted by order and then tokens.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{HEADER} order={} backoff={} unk={}",
            self.config.order, self.config.backoff, self.config.unk_log_penalty
        );
        let sorted: BTreeMap<(usize, &Vec<String>), f64> = self.rel.iter().map(|(g, &lp)| ((g.len(), g), lp)).collect();
        let log_backoff = self.config.backoff.ln();
        for ((n, gram), lp) in sorted {
            let bo = if n < self.config.order { log_backoff } else { 0.0 };
            let _ = writeln!(out, "{lp}\t{}\t{bo}", gram.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::format("empty language model file"))?;
        let rest = header
            .strip_prefix(HEADER)
            .ok_or_else(|| Error::format("missing language model header"))?;
        let mut config = NGramConfig::default();
        for field in rest.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::format(format!("bad header field {field:?}")))?;
            let bad = || Error::format(format!("bad header value {field:?}"));
            match key {
                "order" => config.order = value.parse().map_err(|_| bad())?,
                "backoff" => config.backoff = value.parse().map_err(|_| bad())?,
                "unk" => config.unk_log_penalty = value.parse().map_err(|_| bad())?,
                _ => return Err(Error::format(format!("unknown header field {key:?}"))),
            }
        }
        config.validate().map_err(|e| Error::format(e.to_string()))?;

        let mut rel = HashMap::new();
        for (i, line) in lines.enumerate() {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::format(format!("malformed n-gram line {}", i + 2));
            let mut parts = line.split('\t');
            let lp: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let gram: Vec<String> = parts.next().ok_or_else(bad)?.split(' ').map(str::to_owned).collect();
            let _backoff: f64 = parts.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() || gram.len() > config.order || gram.iter().any(String::is_empty) {
                return Err(bad());
            }
            if !(lp <= 0.0) {
                return Err(bad());
            }
            rel.insert(gram, lp);
        }
        if !rel.keys().any(|g| g.len() == 1) {
            return Err(Error::format("language model has no unigrams"));
        }
        Ok(Self::from_relative(config, rel))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| e.with_path(path))
    }
}
