use rayon::prelude::*;

use super::data::{make_batches, Example};
use super::optim::{clip_global_norm, optimizer_step, AdamConfig, OptimState};
use crate::alphabet::Alphabet;
use crate::ctc::ctc_loss;
use crate::decode::greedy_transcript;
use crate::distill::{combined_loss, kd_loss, LossWeights};
use crate::error::{Error, Result};
use crate::eval::corpus_wer;
use crate::grid::PosteriorGrid;
use crate::matrix::Matrix;
use crate::model::{Mode, ModelParams};
use crate::teacher::Utterance;

/// Default global gradient-norm ceiling.
pub const DEFAULT_CLIP_NORM: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochOptions {
    pub batch_size: usize,
    pub weights: LossWeights,
    pub optim: AdamConfig,
    pub clip_norm: Option<f64>,
    pub seed: u64,
}

/// Per-optimizer-step log entry. Loss parts are batch means over the samples
/// that contributed them; gradient norms are batch means of the weighted
/// per-sample logit-gradient norms.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub total: f64,
    pub ctc_loss: Option<f64>,
    pub kd_loss: Option<f64>,
    pub ctc_grad_norm: f64,
    pub kd_grad_norm: f64,
    /// Global parameter-gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
    /// Samples whose CTC target was infeasible (trained on KD alone, or
    /// skipped without a teacher).
    pub infeasible: usize,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,epoch,total,ctc_loss,kd_loss,ctc_grad_norm,kd_grad_norm,grad_norm,lr,infeasible";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.total,
            opt(self.ctc_loss),
            opt(self.kd_loss),
            self.ctc_grad_norm,
            self.kd_grad_norm,
            self.grad_norm,
            self.lr,
            self.infeasible
        )
    }
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochMetrics {
    pub steps: usize,
    pub mean_total: f64,
    pub mean_ctc: Option<f64>,
    pub mean_kd: Option<f64>,
    pub infeasible: usize,
}

struct SampleLoss {
    total: f64,
    ctc: Option<f64>,
    kd: Option<f64>,
    grad: Option<Matrix<f64>>,
    ctc_norm: f64,
    kd_norm: f64,
    infeasible: bool,
}

/// Loss and logit gradient for one sample. CTC-infeasible targets fall back
/// to the KD term alone when a teacher is available and skip otherwise.
fn sample_loss(ex: &Example<'_>, logits: &Matrix<f64>, weights: LossWeights) -> Result<SampleLoss> {
    let with_id = |e: Error| match e {
        Error::ShapeMismatch(m) => Error::Data {
            message: m,
            ids: vec![ex.id.to_string()],
        },
        other => other,
    };
    let kd_only = |teacher: &PosteriorGrid<f64>, infeasible: bool| -> Result<SampleLoss> {
        let (kd, grad) = kd_loss(teacher, logits).map_err(with_id)?;
        let grad = grad.scale(weights.lambda_kd);
        Ok(SampleLoss {
            total: weights.lambda_kd * kd,
            ctc: None,
            kd: Some(kd),
            kd_norm: grad.frobenius_norm(),
            grad: Some(grad),
            ctc_norm: 0.0,
            infeasible,
        })
    };
    match (&ex.target, ex.teacher) {
        (Some(target), Some(teacher)) => match combined_loss(teacher, logits, target, weights) {
            Ok(r) => Ok(SampleLoss {
                total: r.total,
                ctc: Some(r.ctc_part),
                kd: Some(r.kd_part),
                grad: Some(r.grad_logits),
                ctc_norm: r.ctc_grad_norm,
                kd_norm: r.kd_grad_norm,
                infeasible: false,
            }),
            Err(Error::InfeasibleTarget { .. }) if weights.uses_kd() => kd_only(teacher, true),
            Err(Error::InfeasibleTarget { .. }) => Ok(SampleLoss {
                total: 0.0,
                ctc: None,
                kd: None,
                grad: None,
                ctc_norm: 0.0,
                kd_norm: 0.0,
                infeasible: true,
            }),
            Err(e) => Err(with_id(e)),
        },
        (Some(target), None) => match ctc_loss(logits, target) {
            Ok(r) => {
                let grad = r.grad_logits.scale(weights.lambda_ctc);
                Ok(SampleLoss {
                    total: weights.lambda_ctc * r.loss,
                    ctc: Some(r.loss),
                    kd: None,
                    ctc_norm: grad.frobenius_norm(),
                    grad: Some(grad),
                    kd_norm: 0.0,
                    infeasible: false,
                })
            }
            Err(Error::InfeasibleTarget { .. }) => Ok(SampleLoss {
                total: 0.0,
                ctc: None,
                kd: None,
                grad: None,
                ctc_norm: 0.0,
                kd_norm: 0.0,
                infeasible: true,
            }),
            Err(e) => Err(with_id(e)),
        },
        (None, Some(teacher)) => kd_only(teacher, false),
        (None, None) => Err(Error::Data {
            message: "sample has neither a target nor teacher posteriors".into(),
            ids: vec![ex.id.to_string()],
        }),
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values.flatten().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn dropout_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// One optimizer step on a batch; returns the step record without the
/// step/epoch fields filled in.
fn train_batch(
    params: &mut ModelParams<f32>,
    state: &mut OptimState,
    batch: &[&Example<'_>],
    opts: &EpochOptions,
    step: usize,
    decay_mask: &[bool],
) -> Result<StepRecord> {
    let inputs: Vec<&Matrix<f32>> = batch.iter().map(|e| e.features).collect();
    let mode = Mode::Train {
        dropout_seed: dropout_seed(opts.seed, step),
    };
    let (logits, cache) = params.forward_batch(&inputs, mode)?;

    let losses: Vec<SampleLoss> = batch
        .par_iter()
        .zip(logits.par_iter())
        .map(|(ex, l)| sample_loss(ex, &l.cast::<f64>(), opts.weights))
        .collect::<Result<_>>()?;

    let scale = 1.0 / batch.len() as f64;
    let grad_logits: Vec<Matrix<f32>> = losses
        .iter()
        .zip(&logits)
        .map(|(s, l)| match &s.grad {
            Some(g) => g.scale(scale).cast(),
            None => Matrix::zeros(l.rows(), l.cols()),
        })
        .collect();
    let (mut grads, _) = params.backward(&cache, &grad_logits)?;
    let grad_norm = match opts.clip_norm {
        Some(max) => clip_global_norm(&mut grads, max),
        None => clip_global_norm(&mut grads, f64::INFINITY),
    };
    if !grad_norm.is_finite() {
        return Err(Error::Data {
            message: format!("non-finite gradient norm at step {step}"),
            ids: batch.iter().map(|e| e.id.to_string()).collect(),
        });
    }
    let lr = optimizer_step(params.weights_mut(), &grads, state, &opts.optim, Some(decay_mask))?;
    params.update_running_stats(&cache)?;

    let contributing: Vec<&SampleLoss> = losses.iter().filter(|s| s.grad.is_some()).collect();
    let n = contributing.len().max(1) as f64;
    Ok(StepRecord {
        step: 0,
        epoch: 0,
        total: contributing.iter().map(|s| s.total).sum::<f64>() / n,
        ctc_loss: mean_of(losses.iter().map(|s| s.ctc)),
        kd_loss: mean_of(losses.iter().map(|s| s.kd)),
        ctc_grad_norm: contributing.iter().map(|s| s.ctc_norm).sum::<f64>() / n,
        kd_grad_norm: contributing.iter().map(|s| s.kd_norm).sum::<f64>() / n,
        grad_norm,
        lr,
        infeasible: losses.iter().filter(|s| s.infeasible).count(),
    })
}

/// Runs one pass over `examples`: seeded, length-bucketed mini-batches, the
/// batch-mean objective and one optimizer step per batch. `after_step` sees
/// the updated parameters and may return `true` to stop early.
pub fn train_epoch<F>(
    params: &mut ModelParams<f32>,
    state: &mut OptimState,
    examples: &[Example<'_>],
    opts: &EpochOptions,
    epoch: usize,
    first_step: usize,
    mut after_step: F,
) -> Result<(EpochMetrics, bool)>
where
    F: FnMut(&ModelParams<f32>, &StepRecord) -> Result<bool>,
{
    if examples.is_empty() {
        return Err(Error::Data {
            message: "no training examples".into(),
            ids: Vec::new(),
        });
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    opts.weights.validate()?;
    opts.optim.validate()?;
    let lengths: Vec<usize> = examples.iter().map(|e| e.features.rows()).collect();
    let batch_seed = opts.seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F);
    let decay_mask = params.decay_mask();
    let mut records = Vec::new();
    let mut stopped = false;
    for (k, batch) in make_batches(&lengths, opts.batch_size, batch_seed)
        .into_iter()
        .enumerate()
    {
        let step = first_step + k + 1;
        let refs: Vec<&Example<'_>> = batch.iter().map(|&i| &examples[i]).collect();
        let mut rec = train_batch(params, state, &refs, opts, step, &decay_mask)?;
        rec.step = step;
        rec.epoch = epoch;
        stopped = after_step(params, &rec)?;
        records.push(rec);
        if stopped {
            break;
        }
    }
    let n = records.len() as f64;
    let metrics = EpochMetrics {
        steps: records.len(),
        mean_total: records.iter().map(|r| r.total).sum::<f64>() / n,
        mean_ctc: mean_of(records.iter().map(|r| r.ctc_loss)),
        mean_kd: mean_of(records.iter().map(|r| r.kd_loss)),
        infeasible: records.iter().map(|r| r.infeasible).sum(),
    };
    Ok((metrics, stopped))
}

/// Mean unweighted loss parts of `examples` under the current parameters in
/// evaluation mode.
pub fn evaluate_losses(
    params: &ModelParams<f32>,
    examples: &[Example<'_>],
    weights: LossWeights,
) -> Result<(Option<f64>, Option<f64>)> {
    let mut parts = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(32) {
        let inputs: Vec<&Matrix<f32>> = chunk.iter().map(|e| e.features).collect();
        let (logits, _) = params.forward_batch(&inputs, Mode::Eval)?;
        for (ex, l) in chunk.iter().zip(&logits) {
            let s = sample_loss(ex, &l.cast::<f64>(), weights)?;
            parts.push((s.ctc, s.kd));
        }
    }
    Ok((mean_of(parts.iter().map(|p| p.0)), mean_of(parts.iter().map(|p| p.1))))
}

/// Greedy transcripts of the student's posteriors.
pub fn greedy_transcripts(
    params: &ModelParams<f32>,
    features: &[&Matrix<f32>],
    alphabet: &Alphabet,
) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(features.len());
    for chunk in features.chunks(32) {
        let (logits, _) = params.forward_batch(chunk, Mode::Eval)?;
        for l in logits {
            let grid = PosteriorGrid::from_logits(&l.cast::<f64>())?;
            out.push(greedy_transcript(&grid, alphabet)?);
        }
    }
    Ok(out)
}

/// Corpus WER of greedy decoding against ground-truth transcripts.
pub fn dev_greedy_wer(params: &ModelParams<f32>, dev: &[Utterance], alphabet: &Alphabet) -> Result<f64> {
    let missing: Vec<String> = dev
        .iter()
        .filter(|u| u.transcript_gt.is_none())
        .map(|u| u.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data {
            message: "dev utterances need ground-truth transcripts".into(),
            ids: missing,
        });
    }
    if dev.is_empty() {
        return Err(Error::Data {
            message: "empty dev set".into(),
            ids: Vec::new(),
        });
    }
    let feats: Vec<&Matrix<f32>> = dev.iter().map(|u| &u.features).collect();
    let hyps = greedy_transcripts(params, &feats, alphabet)?;
    let pairs = dev
        .iter()
        .zip(&hyps)
        .map(|(u, h)| (u.transcript_gt.as_deref().unwrap_or(""), h.as_str()));
    Ok(corpus_wer(pairs).wer)
}
