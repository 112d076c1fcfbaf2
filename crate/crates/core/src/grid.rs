use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numeric::{log_softmax, log_sum_exp};
use crate::scalar::Scalar;

/// Per-frame log-distributions over the augmented alphabet `C'`
/// (`frames x symbols`, blank in the last column).
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorGrid<S> {
    log_probs: Matrix<S>,
}

impl<S: Scalar> PosteriorGrid<S> {
    /// Wraps an already-normalized log-probability matrix, rejecting rows
    /// whose log-sum-exp strays from zero by more than the scalar tolerance.
    pub fn from_log_probs(log_probs: Matrix<S>) -> Result<Self> {
        if log_probs.cols() < 2 {
            return Err(Error::ShapeMismatch(
                "a posterior grid needs at least one grapheme and the blank".into(),
            ));
        }
        for (t, row) in log_probs.iter_rows().enumerate() {
            if row.iter().any(|v| v.is_nan() || *v == S::infinity()) {
                return Err(Error::ShapeMismatch(format!("row {t} has non-finite values")));
            }
            let drift = log_sum_exp(row).to_f64_lossy();
            if drift.abs() > S::NORM_TOLERANCE {
                return Err(Error::ShapeMismatch(format!(
                    "row {t} is not normalized (log-sum-exp {drift:e})"
                )));
            }
        }
        Ok(PosteriorGrid { log_probs })
    }

    pub fn from_logits(logits: &Matrix<S>) -> Result<Self> {
        let mut log_probs = logits.clone();
        for r in 0..logits.rows() {
            let row = log_softmax(logits.row(r));
            log_probs.row_mut(r).copy_from_slice(&row);
        }
        Self::from_log_probs(log_probs)
    }

    /// Builds from probabilities; rows are renormalized exactly.
    pub fn from_probs(probs: &Matrix<S>) -> Result<Self> {
        let mut log_probs = probs.clone();
        for r in 0..probs.rows() {
            let row = log_probs.row_mut(r);
            if row.iter().any(|&p| p < S::zero() || !p.is_finite()) {
                return Err(Error::ShapeMismatch(format!("row {r} has invalid probabilities")));
            }
            let sum: S = row.iter().copied().sum();
            if sum <= S::zero() {
                return Err(Error::ShapeMismatch(format!("row {r} has zero mass")));
            }
            for v in row.iter_mut() {
                *v = (*v / sum).ln();
            }
        }
        Self::from_log_probs(log_probs)
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn num_symbols(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn blank_id(&self) -> usize {
        self.log_probs.cols() - 1
    }

    pub fn log_probs(&self) -> &Matrix<S> {
        &self.log_probs
    }

    #[inline]
    pub fn log_prob(&self, t: usize, symbol: usize) -> S {
        self.log_probs.get(t, symbol)
    }

    pub fn probs(&self) -> Matrix<S> {
        self.log_probs.map(S::exp)
    }

    pub fn cast<T: Scalar>(&self) -> PosteriorGrid<T> {
        PosteriorGrid {
            log_probs: self.log_probs.cast(),
        }
    }

    pub fn into_log_probs(self) -> Matrix<S> {
        self.log_probs
    }
}
