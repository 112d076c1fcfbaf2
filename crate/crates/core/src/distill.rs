//! Frame-wise distillation against teacher posteriors and its combination
//! with the CTC objective.

use serde::{Deserialize, Serialize};

use crate::ctc::ctc_loss;
use crate::error::{Error, Result};
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::numeric::log_softmax;
use crate::scalar::Scalar;

pub const DEFAULT_LAMBDA_CTC: f64 = 0.1;
pub const DEFAULT_LAMBDA_KD: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ctc: f64,
    pub lambda_kd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ctc: DEFAULT_LAMBDA_CTC,
            lambda_kd: DEFAULT_LAMBDA_KD,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_ctc: f64, lambda_kd: f64) -> Result<Self> {
        let w = LossWeights { lambda_ctc, lambda_kd };
        w.validate()?;
        Ok(w)
    }

    pub fn ctc_only() -> Self {
        LossWeights {
            lambda_ctc: 1.0,
            lambda_kd: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_ctc) || !ok(self.lambda_kd) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative, got ({}, {})",
                self.lambda_ctc, self.lambda_kd
            )));
        }
        if self.lambda_ctc == 0.0 && self.lambda_kd == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }

    pub fn uses_kd(&self) -> bool {
        self.lambda_kd > 0.0
    }
}

/// Cross-entropy `-sum_t sum_c p_teacher log p_student`, summed over frames,
/// with its gradient `p_student - p_teacher` per logit row.
pub fn kd_loss<S: Scalar>(teacher: &PosteriorGrid<S>, student_logits: &Matrix<S>) -> Result<(S, Matrix<S>)> {
    if teacher.log_probs().shape() != student_logits.shape() {
        return Err(Error::ShapeMismatch(format!(
            "teacher grid is {:?} but student logits are {:?}",
            teacher.log_probs().shape(),
            student_logits.shape()
        )));
    }
    let mut loss = S::zero();
    let mut grad = Matrix::zeros(student_logits.rows(), student_logits.cols());
    for t in 0..student_logits.rows() {
        let student = log_softmax(student_logits.row(t));
        let teacher_row = teacher.log_probs().row(t);
        let grad_row = grad.row_mut(t);
        for c in 0..student.len() {
            let p_teacher = teacher_row[c].exp();
            if p_teacher > S::zero() {
                loss -= p_teacher * student[c];
            }
            grad_row[c] = student[c].exp() - p_teacher;
        }
    }
    Ok((loss, grad))
}

#[derive(Clone, Debug)]
pub struct CombinedLossResult<S> {
    pub total: S,
    pub ctc_part: S,
    pub kd_part: S,
    pub grad_logits: Matrix<S>,
    /// Frobenius norms of the weighted CTC and KD gradient terms.
    pub ctc_grad_norm: S,
    pub kd_grad_norm: S,
}

/// `lambda_ctc * ctc + lambda_kd * kd`. Both parts are always computed so the
/// unweighted values can be logged even when a weight is zero.
pub fn combined_loss<S: Scalar>(
    teacher: &PosteriorGrid<S>,
    student_logits: &Matrix<S>,
    target: &[usize],
    weights: LossWeights,
) -> Result<CombinedLossResult<S>> {
    weights.validate()?;
    let (kd_part, kd_grad) = kd_loss(teacher, student_logits)?;
    let ctc = ctc_loss(student_logits, target)?;
    let l_ctc = S::from_f64_lossy(weights.lambda_ctc);
    let l_kd = S::from_f64_lossy(weights.lambda_kd);

    let mut grad_logits = ctc.grad_logits.scale(l_ctc);
    grad_logits.add_scaled(&kd_grad, l_kd)?;
    Ok(CombinedLossResult {
        total: l_ctc * ctc.loss + l_kd * kd_part,
        ctc_part: ctc.loss,
        kd_part,
        grad_logits,
        ctc_grad_norm: l_ctc * ctc.grad_logits.frobenius_norm(),
        kd_grad_norm: l_kd * kd_grad.frobenius_norm(),
    })
}

/// Shannon entropy of each teacher row, summed over frames.
pub fn grid_entropy<S: Scalar>(grid: &PosteriorGrid<S>) -> S {
    grid.log_probs()
        .as_slice()
        .iter()
        .filter(|lp| **lp > S::neg_infinity())
        .map(|&lp| -lp.exp() * lp)
        .sum()
}
