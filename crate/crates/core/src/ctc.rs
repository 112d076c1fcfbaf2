//! Connectionist temporal classification: the collapse map, an exhaustive
//! path-sum oracle, and the forward-backward loss with logit gradients.

use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::numeric::{log_add, log_softmax, log_sum_exp};
use crate::scalar::Scalar;

/// Frame-level label sequence over `C'` (blank included).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Path {
    labels: Vec<usize>,
}

impl Path {
    pub fn new(labels: Vec<usize>, num_symbols: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_symbols) {
            return Err(Error::InvalidLabel(bad));
        }
        Ok(Path { labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Applies the collapse map with `blank` as the blank id.
    pub fn collapse(&self, blank: usize) -> Vec<usize> {
        collapse(&self.labels, blank)
    }
}

/// Merges adjacent repeats, then drops blanks. A blank between two equal
/// labels keeps both.
pub fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(path.len());
    let mut prev = None;
    for &label in path {
        if label != blank && prev != Some(label) {
            out.push(label);
        }
        prev = Some(label);
    }
    out
}

/// Minimum number of frames an alignment of `target` needs: one per label
/// plus a separating blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub const BRUTE_FORCE_MAX_FRAMES: usize = 12;
pub const BRUTE_FORCE_MAX_SYMBOLS: usize = 5;

/// `log p(target | grid)` by visiting every frame-level path that collapses
/// to `target` and summing their probabilities. Test oracle only.
pub fn ctc_logprob_bruteforce<S: Scalar>(grid: &PosteriorGrid<S>, target: &[usize]) -> Result<S> {
    let frames = grid.frames();
    let symbols = grid.num_symbols();
    if frames > BRUTE_FORCE_MAX_FRAMES || symbols > BRUTE_FORCE_MAX_SYMBOLS {
        return Err(Error::InstanceTooLarge(format!(
            "{frames} frames x {symbols} symbols exceeds {BRUTE_FORCE_MAX_FRAMES} x {BRUTE_FORCE_MAX_SYMBOLS}"
        )));
    }
    let blank = grid.blank_id();
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::InvalidLabel(bad));
    }

    let mut path_log_probs = Vec::new();
    let mut path = Vec::with_capacity(frames);
    enumerate_paths(grid, target, &mut path, S::zero(), &mut path_log_probs);
    Ok(log_sum_exp(&path_log_probs))
}

// Depth-first over paths; a branch is cut as soon as its collapsed prefix
// stops being a prefix of the target.
fn enumerate_paths<S: Scalar>(
    grid: &PosteriorGrid<S>,
    target: &[usize],
    path: &mut Vec<usize>,
    log_prob: S,
    out: &mut Vec<S>,
) {
    let t = path.len();
    if t == grid.frames() {
        if collapse(path, grid.blank_id()) == target {
            out.push(log_prob);
        }
        return;
    }
    let emitted = collapse(path, grid.blank_id());
    if !target.starts_with(&emitted) {
        return;
    }
    for symbol in 0..grid.num_symbols() {
        path.push(symbol);
        enumerate_paths(grid, target, path, log_prob + grid.log_prob(t, symbol), out);
        path.pop();
    }
}

#[derive(Clone, Debug)]
pub struct CtcLossResult<S> {
    /// `-log p(target | softmax(logits))`.
    pub loss: S,
    /// Gradient of `loss` with respect to the pre-softmax logits.
    pub grad_logits: Matrix<S>,
    /// Posterior probability of each symbol at each frame given the target.
    pub occupancy: Matrix<S>,
}

/// CTC loss and its logit gradient via log-domain forward-backward over the
/// blank-interleaved target. The last logit column is the blank.
pub fn ctc_loss<S: Scalar>(logits: &Matrix<S>, target: &[usize]) -> Result<CtcLossResult<S>> {
    let frames = logits.rows();
    let symbols = logits.cols();
    if frames == 0 || symbols < 2 {
        return Err(Error::ShapeMismatch(format!(
            "ctc needs at least one frame and two symbols, got {frames}x{symbols}"
        )));
    }
    if !logits.all_finite() {
        return Err(Error::ShapeMismatch("logits must be finite".into()));
    }
    let blank = symbols - 1;
    if let Some(&bad) = target.iter().find(|&&l| l >= blank) {
        return Err(Error::InvalidLabel(bad));
    }
    let required = min_frames(target);
    if required > frames {
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            frames,
        });
    }

    let mut log_probs = Matrix::zeros(frames, symbols);
    for t in 0..frames {
        log_probs.row_mut(t).copy_from_slice(&log_softmax(logits.row(t)));
    }

    let ext: Vec<usize> = std::iter::once(blank)
        .chain(target.iter().flat_map(|&l| [l, blank]))
        .collect();
    let states = ext.len();
    let neg_inf = S::neg_infinity();
    // skip transition s-2 -> s allowed into a label that differs from the previous label
    let can_skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = Matrix::filled(frames, states, neg_inf);
    alpha.set(0, 0, log_probs.get(0, ext[0]));
    if states > 1 {
        alpha.set(0, 1, log_probs.get(0, ext[1]));
    }
    for t in 1..frames {
        for s in 0..states {
            let mut acc = alpha.get(t - 1, s);
            if s >= 1 {
                acc = log_add(acc, alpha.get(t - 1, s - 1));
            }
            if can_skip(s) {
                acc = log_add(acc, alpha.get(t - 1, s - 2));
            }
            if acc != neg_inf {
                alpha.set(t, s, acc + log_probs.get(t, ext[s]));
            }
        }
    }

    // beta excludes the emission at its own frame
    let mut beta = Matrix::filled(frames, states, neg_inf);
    beta.set(frames - 1, states - 1, S::zero());
    if states > 1 {
        beta.set(frames - 1, states - 2, S::zero());
    }
    for t in (0..frames - 1).rev() {
        for s in 0..states {
            let mut acc = beta.get(t + 1, s) + log_probs.get(t + 1, ext[s]);
            if s + 1 < states {
                acc = log_add(acc, beta.get(t + 1, s + 1) + log_probs.get(t + 1, ext[s + 1]));
            }
            if s + 2 < states && can_skip(s + 2) {
                acc = log_add(acc, beta.get(t + 1, s + 2) + log_probs.get(t + 1, ext[s + 2]));
            }
            beta.set(t, s, acc);
        }
    }

    let mut log_likelihood = alpha.get(frames - 1, states - 1);
    if states > 1 {
        log_likelihood = log_add(log_likelihood, alpha.get(frames - 1, states - 2));
    }
    if log_likelihood == neg_inf {
        // only reachable when every feasible path has probability underflowing to zero
        return Err(Error::InfeasibleTarget {
            target_len: target.len(),
            required,
            frames,
        });
    }

    let mut occupancy = Matrix::zeros(frames, symbols);
    let mut grad_logits = Matrix::zeros(frames, symbols);
    for t in 0..frames {
        let occ = occupancy.row_mut(t);
        for s in 0..states {
            let joint = alpha.get(t, s) + beta.get(t, s);
            if joint != neg_inf {
                occ[ext[s]] += (joint - log_likelihood).exp();
            }
        }
        let grad = grad_logits.row_mut(t);
        for k in 0..symbols {
            grad[k] = log_probs.get(t, k).exp() - occupancy.get(t, k);
        }
    }

    Ok(CtcLossResult {
        loss: -log_likelihood,
        grad_logits,
        occupancy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const A: usize = 0;
    const B: usize = 1;
    const BLANK2: usize = 2;

    #[test]
    fn collapse_examples() {
        // blank = 2 for C = {a, b}
        assert_eq!(collapse(&[A, BLANK2, A, B], BLANK2), vec![A, A, B]);
        assert_eq!(collapse(&[BLANK2, BLANK2], BLANK2), Vec::<usize>::new());
        assert_eq!(collapse(&[A, A, B, BLANK2, B], BLANK2), vec![A, B, B]);
    }

    #[test]
    fn collapse_idempotent_without_blanks() {
        let once = collapse(&[A, A, B, BLANK2, B, A], BLANK2);
        assert_eq!(collapse(&once, BLANK2), collapse(&[A, B, B, A], BLANK2));
        let no_repeats = collapse(&[A, B, A], BLANK2);
        assert_eq!(collapse(&no_repeats, BLANK2), no_repeats);
    }

    #[test]
    fn path_rejects_bad_ids() {
        assert!(Path::new(vec![0, 3], 3).is_err());
        let p = Path::new(vec![0, 2, 0, 1], 3).unwrap();
        assert_eq!(p.collapse(2), vec![0, 0, 1]);
    }

    fn uniform_grid(frames: usize, symbols: usize) -> PosteriorGrid<f64> {
        PosteriorGrid::from_logits(&Matrix::zeros(frames, symbols)).unwrap()
    }

    #[test]
    fn bruteforce_examples() {
        let grid = uniform_grid(2, 2);
        let lp = ctc_logprob_bruteforce(&grid, &[0]).unwrap();
        assert!((lp - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(ctc_logprob_bruteforce(&grid, &[0, 0]).unwrap(), f64::NEG_INFINITY);
        let lp = ctc_logprob_bruteforce(&grid, &[]).unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        assert!(matches!(
            ctc_logprob_bruteforce(&uniform_grid(13, 2), &[]),
            Err(Error::InstanceTooLarge(_))
        ));
        assert!(matches!(
            ctc_logprob_bruteforce(&uniform_grid(2, 6), &[]),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    #[test]
    fn loss_examples() {
        let res = ctc_loss(&Matrix::<f64>::zeros(2, 2), &[0]).unwrap();
        assert!((res.loss + 0.75f64.ln()).abs() < 1e-12);
        assert!((res.loss - 0.28768).abs() < 1e-5);

        // peaked on a - b over C = {a, b}
        let mut logits = Matrix::<f64>::zeros(3, 3);
        logits.set(0, A, 20.0);
        logits.set(1, BLANK2, 20.0);
        logits.set(2, B, 20.0);
        let res = ctc_loss(&logits, &[A, B]).unwrap();
        assert!(res.loss <= 1e-6, "loss {}", res.loss);

        assert!(matches!(
            ctc_loss(&Matrix::<f64>::zeros(2, 2), &[0, 0]),
            Err(Error::InfeasibleTarget {
                required: 3,
                frames: 2,
                ..
            })
        ));
    }

    #[test]
    fn row_sums_of_occupancy_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits = Matrix::from_fn(7, 4, |_, _| rng.random_range(-3.0..3.0));
        let res = ctc_loss(&logits, &[0, 2, 2, 1]).unwrap();
        for t in 0..7 {
            let occ: f64 = res.occupancy.row(t).iter().sum();
            let grad: f64 = res.grad_logits.row(t).iter().sum();
            assert!((occ - 1.0).abs() < 1e-9);
            assert!(grad.abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let frames = rng.random_range(3..8);
            let symbols = rng.random_range(2..5);
            let target: Vec<usize> = (0..rng.random_range(0..3))
                .map(|_| rng.random_range(0..symbols - 1))
                .collect();
            if min_frames(&target) > frames {
                continue;
            }
            let logits = Matrix::from_fn(frames, symbols, |_, _| rng.random_range(-2.0..2.0));
            let res = ctc_loss(&logits, &target).unwrap();
            let numeric = finite_diff_grad(
                |x: &[f64]| {
                    let m = Matrix::from_vec(frames, symbols, x.to_vec()).unwrap();
                    ctc_loss(&m, &target).unwrap().loss
                },
                logits.as_slice(),
                1e-6,
            );
            let err = relative_error(res.grad_logits.as_slice(), &numeric, 1e-12);
            assert!(err <= 1e-5, "relative error {err}");
        }
    }

    #[test]
    fn invalid_target_label() {
        assert!(matches!(
            ctc_loss(&Matrix::<f64>::zeros(3, 2), &[1]),
            Err(Error::InvalidLabel(1))
        ));
    }
}
