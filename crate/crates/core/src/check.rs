//! Self-checks against independent oracles: brute-force CTC path sums,
//! exhaustive decoding, brute-force edit distance, central finite
//! differences and the filter's boundary semantics.
//!
//! Every check is seeded and returns its worst observed discrepancy next to
//! the tolerance it was judged against.

use std::collections::HashSet;
use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::alphabet::Alphabet;
use crate::ctc::{ctc_logprob_bruteforce, ctc_loss, min_frames};
use crate::decode::{beam_search, exhaustive_decode, BeamConfig};
use crate::distill::{combined_loss, kd_loss, LossWeights};
use crate::error::{Error, Result};
use crate::eval::{
    agreement_keep, brute_force_edit_cost, passes_agreement, passes_valid_words, valid_word_ratio, wer,
    DEFAULT_MAX_AGREEMENT_WER, DEFAULT_MIN_VALID_RATIO,
};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::numeric::{finite_diff_grad, relative_error};

pub const CTC_ORACLE_TOLERANCE: f64 = 1e-9;
pub const LOSS_GRADIENT_TOLERANCE: f64 = 1e-5;
pub const MODEL_GRADIENT_TOLERANCE: f64 = 1e-4;
pub const DECODER_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    /// Largest discrepancy seen; counts of mismatches for exact checks.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(serialize_with = "seconds")]
    pub elapsed: Duration,
}

fn seconds<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

impl CheckResult {
    fn new(name: impl Into<String>, instances: usize, worst: f64, tolerance: f64, start: Instant) -> Self {
        CheckResult {
            name: name.into(),
            instances,
            worst,
            tolerance,
            passed: worst <= tolerance,
            elapsed: start.elapsed(),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<22} n={:<4} worst={:.3e} tol={:.1e} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance,
            self.elapsed.as_secs_f64()
        )
    }
}

fn random_logits(rng: &mut ChaCha8Rng, frames: usize, symbols: usize, spread: f64) -> Matrix<f64> {
    Matrix::from_fn(frames, symbols, |_, _| rng.random_range(-spread..spread))
}

fn random_target(rng: &mut ChaCha8Rng, max_len: usize, graphemes: usize) -> Vec<usize> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| rng.random_range(0..graphemes)).collect()
}

/// Forward-backward CTC loss against the brute-force path sum on random
/// instances with at most 6 frames, 3 graphemes and 4 target labels.
/// Infeasible targets must be rejected by the loss and have zero mass.
pub fn ctc_oracle(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let frames = rng.random_range(1..=6);
        let graphemes = rng.random_range(1..=3);
        let logits = random_logits(&mut rng, frames, graphemes + 1, 3.0);
        let target = random_target(&mut rng, 4, graphemes);
        let grid = PosteriorGrid::from_logits(&logits)?;
        let brute = ctc_logprob_bruteforce(&grid, &target)?;
        match ctc_loss(&logits, &target) {
            Ok(res) => worst = worst.max((res.loss + brute).abs()),
            Err(Error::InfeasibleTarget { .. }) if min_frames(&target) > frames && brute == f64::NEG_INFINITY => {}
            Err(e) => return Err(e),
        }
    }
    Ok(CheckResult::new(
        "ctc_oracle",
        instances,
        worst,
        CTC_ORACLE_TOLERANCE,
        start,
    ))
}

/// Central differences of the CTC, KD and combined losses in double
/// precision, one random instance per seed.
pub fn loss_gradients(seeds: &[u64]) -> Result<Vec<CheckResult>> {
    let eps = 1e-6;
    let floor = 1e-8;
    let mut ctc_worst = 0.0f64;
    let mut kd_worst = 0.0f64;
    let mut combined_worst = 0.0f64;
    let (mut t_ctc, mut t_kd, mut t_comb) = (Duration::ZERO, Duration::ZERO, Duration::ZERO);
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = rng.random_range(4..=9);
        let symbols = rng.random_range(3..=6);
        let logits = random_logits(&mut rng, frames, symbols, 2.0);
        let target: Vec<usize> = (0..rng.random_range(1..=3))
            .map(|_| rng.random_range(0..symbols - 1))
            .collect();
        let teacher = PosteriorGrid::from_logits(&random_logits(&mut rng, frames, symbols, 3.0))?;
        let shaped = |x: &[f64]| Matrix::from_vec(frames, symbols, x.to_vec()).expect("shape is fixed");

        let start = Instant::now();
        let analytic = ctc_loss(&logits, &target)?.grad_logits;
        let numeric = finite_diff_grad(
            |x| ctc_loss(&shaped(x), &target).map_or(f64::NAN, |r| r.loss),
            logits.as_slice(),
            eps,
        );
        ctc_worst = ctc_worst.max(relative_error(analytic.as_slice(), &numeric, floor));
        t_ctc += start.elapsed();

        let start = Instant::now();
        let (_, analytic) = kd_loss(&teacher, &logits)?;
        let numeric = finite_diff_grad(
            |x| kd_loss(&teacher, &shaped(x)).map_or(f64::NAN, |r| r.0),
            logits.as_slice(),
            eps,
        );
        kd_worst = kd_worst.max(relative_error(analytic.as_slice(), &numeric, floor));
        t_kd += start.elapsed();

        let start = Instant::now();
        let weights = LossWeights::default();
        let analytic = combined_loss(&teacher, &logits, &target, weights)?.grad_logits;
        let numeric = finite_diff_grad(
            |x| combined_loss(&teacher, &shaped(x), &target, weights).map_or(f64::NAN, |r| r.total),
            logits.as_slice(),
            eps,
        );
        combined_worst = combined_worst.max(relative_error(analytic.as_slice(), &numeric, floor));
        t_comb += start.elapsed();
    }
    let result = |name: &str, worst: f64, elapsed: Duration| CheckResult {
        name: name.into(),
        instances: seeds.len(),
        worst,
        tolerance: LOSS_GRADIENT_TOLERANCE,
        // NaN never passes
        passed: worst <= LOSS_GRADIENT_TOLERANCE,
        elapsed,
    };
    Ok(vec![
        result("ctc_gradient", ctc_worst, t_ctc),
        result("kd_gradient", kd_worst, t_kd),
        result("combined_gradient", combined_worst, t_comb),
    ])
}

/// Directions per seed along which the model gradient is probed.
const WEIGHT_DIRECTIONS: usize = 4;
const INPUT_DIRECTIONS: usize = 2;

/// Total combined loss of a batch, in the precision of `model`.
fn batch_loss<S: crate::Scalar>(
    model: &ModelParams<S>,
    inputs: &[Matrix<S>],
    teachers: &[PosteriorGrid<S>],
    targets: &[Vec<usize>],
    mode: Mode,
) -> Result<(S, Vec<Matrix<S>>, crate::model::ForwardCache<S>)> {
    let refs: Vec<&Matrix<S>> = inputs.iter().collect();
    let (logits, cache) = model.forward_batch(&refs, mode)?;
    let mut total = S::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for ((l, teacher), target) in logits.iter().zip(teachers).zip(targets) {
        let r = combined_loss(teacher, l, target, LossWeights::default())?;
        total += r.total;
        grads.push(r.grad_logits);
    }
    Ok((total, grads, cache))
}

fn unit_direction(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single-precision backpropagation through `config` (combined loss on top,
/// training mode with dropout) against double-precision central differences
/// of the same network, along random unit directions in weight space and in
/// input space.
pub fn model_gradients(name: &str, config: &ModelConfig, seeds: &[u64]) -> Result<CheckResult> {
    let start = Instant::now();
    let eps = 1e-7;
    let mut worst = 0.0f64;
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m32 = ModelParams::<f32>::init(config, seed)?;
        let lengths = [7usize, 5];
        let xs32: Vec<Matrix<f32>> = lengths
            .iter()
            .map(|&t| Matrix::from_fn(t, config.input_dim, |_, _| rng.sample::<f32, _>(StandardNormal)))
            .collect();
        let teachers32: Vec<PosteriorGrid<f32>> = lengths
            .iter()
            .map(|&t| {
                PosteriorGrid::from_logits(&Matrix::from_fn(2 * t, config.num_symbols, |_, _| {
                    rng.random_range(-3.0f32..3.0)
                }))
            })
            .collect::<Result<_>>()?;
        let targets: Vec<Vec<usize>> = lengths
            .iter()
            .map(|&t| {
                (0..t / 2)
                    .map(|_| rng.random_range(0..config.num_symbols - 1))
                    .collect()
            })
            .collect();
        let mode = Mode::Train { dropout_seed: seed };

        let (_, grads, cache) = batch_loss(&m32, &xs32, &teachers32, &targets, mode)?;
        let (gw, gx) = m32.backward(&cache, &grads)?;
        let gw: Vec<f64> = gw.iter().map(|&v| v as f64).collect();
        let gx: Vec<f64> = gx.iter().flat_map(|m| m.as_slice().iter().map(|&v| v as f64)).collect();

        let m64 = m32.cast::<f64>();
        let xs64: Vec<Matrix<f64>> = xs32.iter().map(Matrix::cast).collect();
        let teachers64: Vec<PosteriorGrid<f64>> = teachers32.iter().map(PosteriorGrid::cast).collect();
        let loss64 = |m: &ModelParams<f64>, xs: &[Matrix<f64>]| -> Result<f64> {
            Ok(batch_loss(m, xs, &teachers64, &targets, mode)?.0)
        };

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..WEIGHT_DIRECTIONS {
            let v = unit_direction(&mut rng, m64.num_params());
            let mut probe = m64.clone();
            let shift = |p: &mut ModelParams<f64>, sign: f64| {
                for (w, (w0, d)) in p.weights_mut().iter_mut().zip(m64.weights().iter().zip(&v)) {
                    *w = w0 + sign * eps * d;
                }
            };
            shift(&mut probe, 1.0);
            let up = loss64(&probe, &xs64)?;
            shift(&mut probe, -1.0);
            let down = loss64(&probe, &xs64)?;
            analytic.push(dot(&gw, &v));
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric, 1e-6));

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for _ in 0..INPUT_DIRECTIONS {
            let v = unit_direction(&mut rng, gx.len());
            let shifted = |sign: f64| -> Vec<Matrix<f64>> {
                let mut offset = 0;
                xs64.iter()
                    .map(|x| {
                        let mut y = x.clone();
                        for (val, d) in y.as_mut_slice().iter_mut().zip(&v[offset..]) {
                            *val += sign * eps * d;
                        }
                        offset += x.as_slice().len();
                        y
                    })
                    .collect()
            };
            let up = loss64(&m64, &shifted(1.0))?;
            let down = loss64(&m64, &shifted(-1.0))?;
            analytic.push(dot(&gx, &v));
            numeric.push((up - down) / (2.0 * eps));
        }
        worst = worst.max(relative_error(&analytic, &numeric, 1e-6));
    }
    let mut r = CheckResult::new(name, seeds.len(), worst, MODEL_GRADIENT_TOLERANCE, start);
    r.passed = worst <= MODEL_GRADIENT_TOLERANCE;
    Ok(r)
}

/// Prefix beam search without an LM at a width no instance can fill,
/// against exhaustive search. Instances have at most 5 frames and 3
/// graphemes. At every width from 1 to 1024 the beam's score must stay at or
/// below the exhaustive optimum, since it sums a subset of the paths of a
/// single labelling.
///
/// `worst` is the largest score gap to the oracle at full width, or
/// infinity if a transcript differs or a narrower beam beats the optimum.
pub fn decoder_oracle(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (grid, alphabet) in decoder_instances(instances, seed)? {
        let (labels, logp) = exhaustive_decode(&grid)?;
        let wide = beam_search(&grid, &alphabet, &BeamConfig::with_width(10_000), None)?;
        if wide.labels != labels {
            worst = f64::INFINITY;
        }
        worst = worst.max((wide.score - logp).abs());
        for score in width_scores(&grid, &alphabet)? {
            if score > logp + DECODER_TOLERANCE {
                worst = f64::INFINITY;
            }
        }
    }
    Ok(CheckResult::new(
        "decoder_oracle",
        instances,
        worst,
        DECODER_TOLERANCE,
        start,
    ))
}

/// Instances of [`decoder_oracle`] on which doubling the beam width lowers
/// the best score. Prefix beam search does not guarantee monotone scores in
/// the width, so this is reported rather than checked.
pub fn beam_width_inversions(instances: usize, seed: u64) -> Result<usize> {
    let mut count = 0;
    for (grid, alphabet) in decoder_instances(instances, seed)? {
        let scores = width_scores(&grid, &alphabet)?;
        if scores.windows(2).any(|w| w[1] < w[0]) {
            count += 1;
        }
    }
    Ok(count)
}

fn decoder_instances(instances: usize, seed: u64) -> Result<Vec<(PosteriorGrid<f64>, Alphabet)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters = ['a', 'b', 'c'];
    (0..instances)
        .map(|_| {
            let frames = rng.random_range(1..=5);
            let graphemes = rng.random_range(1..=3);
            let alphabet = Alphabet::new(letters[..graphemes].iter().copied())?;
            let grid = PosteriorGrid::from_logits(&random_logits(&mut rng, frames, graphemes + 1, 3.0))?;
            Ok((grid, alphabet))
        })
        .collect()
}

/// Best beam score at widths 1, 2, 4, ..., 1024.
fn width_scores(grid: &PosteriorGrid<f64>, alphabet: &Alphabet) -> Result<Vec<f64>> {
    (0..=10)
        .map(|k| Ok(beam_search(grid, alphabet, &BeamConfig::with_width(1 << k), None)?.score))
        .collect()
}

/// Alignment-based WER against the brute-force edit cost on random word
/// sequences of up to 6 words. `worst` counts mismatches.
pub fn wer_oracle(instances: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = ["a", "b", "c", "d"];
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let r: Vec<&str> = (0..rng.random_range(1..=6))
            .map(|_| vocab[rng.random_range(0..4)])
            .collect();
        let h: Vec<&str> = (0..rng.random_range(0..=6))
            .map(|_| vocab[rng.random_range(0..4)])
            .collect();
        let b = wer(&r, &h)?;
        let cost = brute_force_edit_cost(&r, &h);
        if b.errors() != cost || b.wer != cost as f64 / r.len() as f64 {
            mismatches += 1;
        }
    }
    Ok(CheckResult::new("wer_oracle", instances, mismatches as f64, 0.0, start))
}

/// Inclusive valid-word threshold and strict agreement threshold at the
/// default values, both on raw ratios and on transcripts that land exactly
/// on the boundary. `worst` counts violated cases.
pub fn filter_boundaries() -> Result<CheckResult> {
    let start = Instant::now();
    let words: Vec<String> = (0..10).map(|i| format!("word{i}")).collect();
    let mut dictionary: HashSet<String> = words.iter().cloned().collect();
    dictionary.remove("word9");
    let nine_of_ten = valid_word_ratio(&words.join(" "), &dictionary);
    dictionary.remove("word8");
    let eight_of_ten = valid_word_ratio(&words.join(" "), &dictionary);

    // 25 words; 7 substitutions give WER exactly 0.28, 6 give 0.24
    let primary: Vec<String> = (0..25).map(|i| format!("w{i}")).collect();
    let with_errors = |n: usize| -> String {
        primary
            .iter()
            .enumerate()
            .map(|(i, w)| if i < n { "x".to_string() } else { w.clone() })
            .collect::<Vec<_>>()
            .join(" ")
    };
    let primary_line = primary.join(" ");

    let cases = [
        passes_valid_words(0.90, DEFAULT_MIN_VALID_RATIO),
        !passes_valid_words(0.8999, DEFAULT_MIN_VALID_RATIO),
        passes_agreement(0.2799, DEFAULT_MAX_AGREEMENT_WER),
        !passes_agreement(0.28, DEFAULT_MAX_AGREEMENT_WER),
        nine_of_ten == 0.9 && passes_valid_words(nine_of_ten, DEFAULT_MIN_VALID_RATIO),
        !passes_valid_words(eight_of_ten, DEFAULT_MIN_VALID_RATIO),
        !agreement_keep(&primary_line, &with_errors(7), DEFAULT_MAX_AGREEMENT_WER)?,
        agreement_keep(&primary_line, &with_errors(6), DEFAULT_MAX_AGREEMENT_WER)?,
    ];
    let failures = cases.iter().filter(|ok| !**ok).count();
    Ok(CheckResult::new(
        "filter_boundaries",
        cases.len(),
        failures as f64,
        0.0,
        start,
    ))
}

/// Output frames equal twice the input frames for every listed length.
/// `worst` counts violations.
pub fn shape_contract(name: &str, config: &ModelConfig, lengths: &[usize]) -> Result<CheckResult> {
    let start = Instant::now();
    let model = ModelParams::<f32>::init(config, 0)?;
    let mut violations = 0usize;
    for &t in lengths {
        let x = Matrix::from_fn(t, config.input_dim, |r, c| ((r * 7 + c) % 5) as f32 * 0.1);
        let (out, _) = model.forward(&x, Mode::Eval)?;
        if out.shape() != (2 * t, config.num_symbols) {
            violations += 1;
        }
    }
    Ok(CheckResult::new(name, lengths.len(), violations as f64, 0.0, start))
}

/// Feature dimension and symbol count used by the model checks.
const CHECK_INPUT_DIM: usize = 16;

/// The whole suite with its default sizes. The paper-size shape check is
/// skipped when `quick` is set.
pub fn run_suite(seed: u64, quick: bool) -> Result<Vec<CheckResult>> {
    let symbols = Alphabet::english().num_symbols();
    let seeds = [seed, seed + 1, seed + 2];
    let mut out = vec![ctc_oracle(200, seed)?];
    out.extend(loss_gradients(&seeds)?);
    out.push(model_gradients(
        "desk_model_gradient",
        &ModelConfig::desk(CHECK_INPUT_DIM, symbols),
        &seeds,
    )?);
    out.push(decoder_oracle(100, seed)?);
    out.push(wer_oracle(200, seed)?);
    out.push(filter_boundaries()?);
    let lengths = [1, 2, 7, 40];
    out.push(shape_contract(
        "desk_shape",
        &ModelConfig::desk(CHECK_INPUT_DIM, symbols),
        &lengths,
    )?);
    if !quick {
        out.push(shape_contract(
            "paper_shape",
            &ModelConfig::paper(CHECK_INPUT_DIM, symbols),
            &lengths,
        )?);
    }
    Ok(out)
}
