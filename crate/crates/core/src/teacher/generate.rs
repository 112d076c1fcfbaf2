use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::io::{posteriors_from_bytes, posteriors_to_bytes};
use crate::alphabet::Alphabet;
use crate::decode::greedy_transcript;
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::numeric::log_softmax;

/// One paired sample: student-rate features, teacher-rate posteriors and
/// the transcripts attached to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `T_v x D` student input.
    pub features: Matrix<f32>,
    /// `2 T_v x |C'|` teacher posteriors.
    pub teacher_posteriors: Option<PosteriorGrid<f64>>,
    pub transcript_gt: Option<String>,
    /// Greedy transcript of the teacher grid.
    pub transcript_asr: Option<String>,
    /// Transcript from a noisier second recognizer, for agreement filtering.
    pub transcript_asr2: Option<String>,
}

impl Utterance {
    pub fn student_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub alphabet: Alphabet,
    pub num_utterances: usize,
    /// Inclusive range of transcript lengths in graphemes.
    pub transcript_length: (usize, usize),
    /// Inclusive range of student frames spent on each grapheme.
    pub frames_per_grapheme: (usize, usize),
    /// Feature width; the last dimension flags the first frame of each
    /// grapheme so repeated letters stay distinguishable.
    pub feature_dim: usize,
    /// Value of the onset flag before noise.
    pub onset_strength: f64,
    pub feature_noise_sigma: f64,
    /// Teacher probability on the emitted grapheme at spike frames and on
    /// blank elsewhere.
    pub teacher_peakiness: f64,
    /// Share of the non-blank mass at non-spike frames that stays on the
    /// grapheme being spoken (the rest is spread over the others).
    pub residual_on_grapheme: f64,
    /// Maximum shift of each spike, in teacher frames.
    pub spike_jitter: usize,
    /// Words in the synthetic lexicon that transcripts are drawn from (used
    /// when the alphabet contains a space).
    pub vocab_size: usize,
    pub word_length: (usize, usize),
    /// Standard deviation of log-space noise applied to the teacher's
    /// posteriors themselves, which makes its transcripts imperfect.
    pub teacher_noise: f64,
    /// Standard deviation of the log-space noise added to teacher posteriors
    /// before decoding the secondary transcript.
    pub secondary_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            alphabet: Alphabet::english(),
            num_utterances: 600,
            transcript_length: (8, 12),
            frames_per_grapheme: (3, 5),
            feature_dim: 16,
            onset_strength: 3.0,
            feature_noise_sigma: 0.5,
            teacher_peakiness: 0.9,
            residual_on_grapheme: 0.5,
            spike_jitter: 1,
            vocab_size: 200,
            word_length: (2, 6),
            teacher_noise: 0.7,
            secondary_noise: 0.7,
            seed: 0,
        }
    }
}

fn check_range(name: &str, (lo, hi): (usize, usize)) -> Result<()> {
    if lo == 0 || lo > hi {
        return Err(Error::Config(format!(
            "{name} range [{lo}, {hi}] is empty or starts at zero"
        )));
    }
    Ok(())
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("transcript_length", self.transcript_length)?;
        check_range("frames_per_grapheme", self.frames_per_grapheme)?;
        check_range("word_length", self.word_length)?;
        if self.feature_dim < 2 {
            return Err(Error::Config("feature_dim must be at least 2".into()));
        }
        if !(self.teacher_peakiness > 0.0 && self.teacher_peakiness <= 1.0) {
            return Err(Error::Config(format!(
                "teacher_peakiness {} not in (0, 1]",
                self.teacher_peakiness
            )));
        }
        if !(0.0..=1.0).contains(&self.residual_on_grapheme) {
            return Err(Error::Config("residual_on_grapheme must be in [0, 1]".into()));
        }
        if !(self.feature_noise_sigma >= 0.0) || !(self.secondary_noise >= 0.0) || !(self.teacher_noise >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.alphabet.is_empty() {
            return Err(Error::Config("alphabet is empty".into()));
        }
        if self.alphabet.space_id().is_some() {
            if self.vocab_size == 0 {
                return Err(Error::Config("vocab_size must be positive".into()));
            }
            if letters(&self.alphabet).is_empty() {
                return Err(Error::Config("alphabet has no letters to build words from".into()));
            }
        }
        Ok(())
    }
}

fn letters(alphabet: &Alphabet) -> Vec<char> {
    alphabet
        .graphemes()
        .iter()
        .copied()
        .filter(|c| c.is_alphabetic())
        .collect()
}

fn utterance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Distinct random words over the alphabet's letters, sorted.
pub fn generate_lexicon(config: &GenConfig) -> Result<Vec<String>> {
    config.validate()?;
    let letters = letters(&config.alphabet);
    if letters.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = utterance_rng(config.seed, 0);
    let mut words = BTreeSet::new();
    let mut attempts = 0usize;
    while words.len() < config.vocab_size {
        attempts += 1;
        if attempts > 100 * config.vocab_size + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {} distinct words of length {:?}",
                config.vocab_size, config.word_length
            )));
        }
        let len = rng.random_range(config.word_length.0..=config.word_length.1);
        let word: String = (0..len).map(|_| *letters.choose(&mut rng).expect("letters")).collect();
        words.insert(word);
    }
    Ok(words.into_iter().collect())
}

struct Shared {
    lexicon: Vec<String>,
    embeddings: Vec<Vec<f64>>,
}

fn shared(config: &GenConfig) -> Result<Shared> {
    let lexicon = generate_lexicon(config)?;
    let mut rng = utterance_rng(config.seed, u64::MAX);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let embeddings = (0..config.alphabet.len())
        .map(|_| (0..config.feature_dim - 1).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    Ok(Shared { lexicon, embeddings })
}

fn sample_transcript(config: &GenConfig, lexicon: &[String], rng: &mut ChaCha8Rng) -> Result<String> {
    let (lo, hi) = config.transcript_length;
    if config.alphabet.space_id().is_none() {
        let len = rng.random_range(lo..=hi);
        let g = config.alphabet.graphemes();
        return Ok((0..len).map(|_| *g.choose(rng).expect("nonempty")).collect());
    }
    for _ in 0..1000 {
        let mut text = String::new();
        while text.chars().count() < lo {
            if !text.is_empty() {
                text.push(' ');
            }
            text.push_str(lexicon.choose(rng).expect("nonempty lexicon"));
        }
        if text.chars().count() <= hi {
            return Ok(text);
        }
    }
    Err(Error::Config(format!(
        "transcript_length {:?} is unreachable with word_length {:?}",
        config.transcript_length, config.word_length
    )))
}

fn teacher_probs(config: &GenConfig, labels: &[usize], durations: &[usize], rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let graphemes = config.alphabet.len();
    let blank = graphemes;
    let p = config.teacher_peakiness;
    let frames = 2 * durations.iter().sum::<usize>();
    let mut probs = Matrix::zeros(frames, graphemes + 1);
    let tail = config.residual_on_grapheme;
    let mut t = 0;
    for (&label, &dur) in labels.iter().zip(durations) {
        for _ in 0..2 * dur {
            let row = probs.row_mut(t);
            if graphemes == 1 {
                row[0] = 1.0 - p;
            } else {
                row.iter_mut()
                    .for_each(|v| *v = (1.0 - tail) * (1.0 - p) / (graphemes - 1) as f64);
                row[label] = tail * (1.0 - p);
            }
            row[blank] = p;
            t += 1;
        }
    }
    let jitter = config.spike_jitter as i64;
    let mut start = 0usize;
    for (&label, &dur) in labels.iter().zip(durations) {
        let len = 2 * dur;
        let end = start + len;
        let base = start as i64;
        let shift = if jitter > 0 {
            rng.random_range(-jitter..=jitter)
        } else {
            0
        };
        // Spikes sit at the grapheme onset, shifted by the jitter but kept
        // inside the segment; its last frame stays blank so equal neighbours
        // never merge.
        let pos = (base + shift).clamp(start as i64, end as i64 - 2) as usize;
        let row = probs.row_mut(pos);
        if graphemes == 1 {
            row[blank] = 1.0 - p;
        } else {
            row.iter_mut()
                .for_each(|v| *v = 0.2 * (1.0 - p) / (graphemes - 1) as f64);
            row[blank] = 0.8 * (1.0 - p);
        }
        row[label] = p;
        start = end;
    }
    probs
}

/// Adds `N(0, sigma)` to every log-probability (floored at -30) and
/// renormalizes each row.
fn perturb(grid: &PosteriorGrid<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Result<PosteriorGrid<f64>> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut noisy = grid.log_probs().clone();
    for r in 0..noisy.rows() {
        let row = noisy.row_mut(r);
        for v in row.iter_mut() {
            *v = v.max(-30.0) + noise.sample(rng);
        }
        let norm = log_softmax(row);
        row.copy_from_slice(&norm);
    }
    PosteriorGrid::from_log_probs(noisy)
}

fn generate_one(config: &GenConfig, shared: &Shared, index: usize) -> Result<Utterance> {
    let mut rng = utterance_rng(config.seed, index as u64 + 1);
    let text = sample_transcript(config, &shared.lexicon, &mut rng)?;
    let labels = config.alphabet.encode(&text)?;
    let (lo, hi) = config.frames_per_grapheme;
    let durations: Vec<usize> = labels.iter().map(|_| rng.random_range(lo..=hi)).collect();
    let frames: usize = durations.iter().sum();

    let noise = Normal::new(0.0, config.feature_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let dim = config.feature_dim;
    let mut features = Matrix::zeros(frames, dim);
    let mut t = 0;
    for (&label, &dur) in labels.iter().zip(&durations) {
        for k in 0..dur {
            let row = features.row_mut(t);
            for (v, &e) in row.iter_mut().zip(&shared.embeddings[label]) {
                *v = (e + noise.sample(&mut rng)) as f32;
            }
            row[dim - 1] = (if k == 0 { config.onset_strength } else { 0.0 } + noise.sample(&mut rng)) as f32;
            t += 1;
        }
    }

    let clean = PosteriorGrid::from_probs(&teacher_probs(config, &labels, &durations, &mut rng))?;
    let grid = if config.teacher_noise > 0.0 {
        perturb(&clean, config.teacher_noise, &mut rng)?
    } else {
        clean.clone()
    };
    // Quantize exactly as a posterior file would, so in-memory and on-disk
    // corpora agree.
    let grid = posteriors_from_bytes(&posteriors_to_bytes(&grid))?;
    let asr = greedy_transcript(&grid, &config.alphabet)?;
    // The second recognizer errs independently of the teacher.
    let asr2 = greedy_transcript(&perturb(&clean, config.secondary_noise, &mut rng)?, &config.alphabet)?;

    Ok(Utterance {
        id: format!("utt{index:06}"),
        features,
        teacher_posteriors: Some(grid),
        transcript_gt: Some(text),
        transcript_asr: Some(asr),
        transcript_asr2: Some(asr2),
    })
}

/// Generates `num_utterances` samples. Each depends only on the seed and
/// its index, so generation runs in parallel without affecting the output.
pub fn generate_corpus(config: &GenConfig) -> Result<Vec<Utterance>> {
    config.validate()?;
    let shared = shared(config)?;
    (0..config.num_utterances)
        .into_par_iter()
        .map(|i| generate_one(config, &shared, i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctc::ctc_logprob_bruteforce;
    use crate::numeric::log_sum_exp;

    fn small(seed: u64) -> GenConfig {
        GenConfig {
            num_utterances: 20,
            seed,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_corpus(&small(3)).unwrap();
        let b = generate_corpus(&small(3)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(4)).unwrap();
        assert_ne!(a, c);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        assert_eq!(pool.install(|| generate_corpus(&small(3)).unwrap()), a);
    }

    #[test]
    fn rates_lengths_and_normalization() {
        let cfg = small(5);
        for u in generate_corpus(&cfg).unwrap() {
            let grid = u.teacher_posteriors.as_ref().unwrap();
            assert_eq!(grid.frames(), 2 * u.student_frames());
            assert_eq!(grid.num_symbols(), 29);
            assert_eq!(u.features.cols(), cfg.feature_dim);
            let len = u.transcript_gt.as_ref().unwrap().chars().count();
            assert!((8..=12).contains(&len));
            for row in grid.log_probs().iter_rows() {
                assert!(log_sum_exp(row).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn peaky_teacher_without_jitter_is_one_hot() {
        let cfg = GenConfig {
            teacher_peakiness: 1.0,
            spike_jitter: 0,
            teacher_noise: 0.0,
            ..small(6)
        };
        for u in generate_corpus(&cfg).unwrap() {
            let grid = u.teacher_posteriors.unwrap();
            let labels = cfg.alphabet.encode(u.transcript_gt.as_ref().unwrap()).unwrap();
            let spikes: Vec<usize> = grid
                .probs()
                .iter_rows()
                .filter_map(|row| {
                    assert!(row.iter().all(|&p| p == 0.0 || p == 1.0));
                    row.iter().position(|&p| p == 1.0).filter(|&k| k != grid.blank_id())
                })
                .collect();
            assert_eq!(spikes, labels);
            assert_eq!(u.transcript_asr, u.transcript_gt);
        }
    }

    #[test]
    fn clean_teacher_greedy_recovers_transcripts() {
        let cfg = GenConfig {
            teacher_noise: 0.0,
            ..small(7)
        };
        for u in generate_corpus(&cfg).unwrap() {
            assert_eq!(u.transcript_asr, u.transcript_gt);
        }
    }

    #[test]
    fn noisy_teacher_errs_on_some_utterances() {
        let cfg = GenConfig {
            num_utterances: 200,
            ..small(7)
        };
        let utts = generate_corpus(&cfg).unwrap();
        let wrong = utts.iter().filter(|u| u.transcript_asr != u.transcript_gt).count();
        assert!(wrong > 0 && wrong < 100, "{wrong} of 200 teacher transcripts wrong");
        let wrong2 = utts.iter().filter(|u| u.transcript_asr2 != u.transcript_gt).count();
        assert!(
            wrong2 > 0 && wrong2 < 100,
            "{wrong2} of 200 secondary transcripts wrong"
        );
    }

    #[test]
    fn true_transcript_is_the_most_likely_of_its_length() {
        let alphabet = Alphabet::new(['a', 'b', 'c']).unwrap();
        let cfg = GenConfig {
            alphabet: alphabet.clone(),
            num_utterances: 30,
            transcript_length: (2, 2),
            frames_per_grapheme: (1, 3),
            teacher_peakiness: 0.9,
            spike_jitter: 0,
            teacher_noise: 0.0,
            seed: 8,
            ..GenConfig::default()
        };
        for u in generate_corpus(&cfg).unwrap() {
            let grid = u.teacher_posteriors.unwrap();
            let truth = alphabet.encode(u.transcript_gt.as_ref().unwrap()).unwrap();
            let best = ctc_logprob_bruteforce(&grid, &truth).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    if [a, b] != truth[..] {
                        assert!(ctc_logprob_bruteforce(&grid, &[a, b]).unwrap() < best);
                    }
                }
            }
        }
    }

    #[test]
    fn config_errors() {
        let bad = GenConfig {
            frames_per_grapheme: (3, 2),
            ..GenConfig::default()
        };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config(_))));
        let bad = GenConfig {
            teacher_peakiness: 0.0,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = GenConfig {
            transcript_length: (0, 4),
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lexicon_words_fill_transcripts() {
        let cfg = small(9);
        let lexicon: BTreeSet<String> = generate_lexicon(&cfg).unwrap().into_iter().collect();
        assert_eq!(lexicon.len(), cfg.vocab_size);
        for u in generate_corpus(&cfg).unwrap() {
            for w in u.transcript_gt.unwrap().split(' ') {
                assert!(lexicon.contains(w));
            }
        }
    }

    #[test]
    fn config_parses_from_toml_with_defaults() {
        let cfg: GenConfig = toml::from_str("num_utterances = 5\nalphabet = \"ab\"\n").unwrap();
        assert_eq!(cfg.num_utterances, 5);
        assert_eq!(cfg.alphabet.len(), 2);
        assert!(toml::from_str::<GenConfig>("bogus = 1").is_err());
    }
}
