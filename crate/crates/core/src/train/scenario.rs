use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{prepare_examples, Example, TargetSource};
use super::epoch::{dev_greedy_wer, evaluate_losses, opt, train_epoch, EpochOptions, StepRecord, DEFAULT_CLIP_NORM};
use super::optim::{AdamConfig, OptimState, Schedule};
use crate::alphabet::Alphabet;
use crate::distill::LossWeights;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::teacher::Utterance;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// CTC on ground-truth transcripts.
    FullSupervision,
    /// Combined objective on teacher transcripts and posteriors.
    NoSupervision,
    /// `NoSupervision`, then CTC fine-tuning on a labelled subset.
    PretrainFinetune,
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full_supervision" => Ok(Scenario::FullSupervision),
            "no_supervision" => Ok(Scenario::NoSupervision),
            "pretrain_finetune" => Ok(Scenario::PretrainFinetune),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::FullSupervision => "full_supervision",
            Scenario::NoSupervision => "no_supervision",
            Scenario::PretrainFinetune => "pretrain_finetune",
        })
    }
}

pub const DEFAULT_FINETUNE_FRACTION: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    /// Weights of the unsupervised phase; supervised phases use CTC alone.
    pub weights: LossWeights,
    pub epochs: usize,
    pub finetune_epochs: usize,
    /// Share of the training set whose ground truth is used for fine-tuning.
    pub finetune_fraction: f64,
    pub batch_size: usize,
    /// Evaluate every this many optimizer steps; 0 evaluates after each
    /// epoch only.
    pub eval_every: usize,
    pub seed: u64,
    pub optim: AdamConfig,
    pub clip_norm: Option<f64>,
    /// Hard cap on optimizer steps across all phases.
    pub max_steps: Option<usize>,
    /// Stop as soon as an evaluation reaches this dev WER.
    pub stop_at_wer: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::NoSupervision,
            weights: LossWeights::default(),
            epochs: 10,
            finetune_epochs: 0,
            finetune_fraction: DEFAULT_FINETUNE_FRACTION,
            batch_size: 16,
            eval_every: 0,
            seed: 0,
            optim: AdamConfig::default(),
            clip_norm: Some(DEFAULT_CLIP_NORM),
            max_steps: None,
            stop_at_wer: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "finetune_fraction {} not in (0, 1]",
                self.finetune_fraction
            )));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    /// Mean training loss parts since the previous point (for the initial
    /// point, evaluated on the training set before any update).
    pub ctc_loss: Option<f64>,
    pub kd_loss: Option<f64>,
    pub dev_greedy_wer: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCurve {
    pub points: Vec<CurvePoint>,
}

impl TrainingCurve {
    pub const CSV_HEADER: &'static str = "step,epoch,ctc_loss,kd_loss,dev_greedy_wer";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p.step,
                p.epoch,
                opt(p.ctc_loss),
                opt(p.kd_loss),
                p.dev_greedy_wer
            ));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// First evaluated step whose dev WER is at most `wer`.
    pub fn steps_to_reach(&self, wer: f64) -> Option<usize> {
        self.points.iter().find(|p| p.dev_greedy_wer <= wer).map(|p| p.step)
    }

    pub fn final_wer(&self) -> Option<f64> {
        self.points.last().map(|p| p.dev_greedy_wer)
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub curve: TrainingCurve,
    pub steps: Vec<StepRecord>,
    pub params: ModelParams<f32>,
}

impl ScenarioOutcome {
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", StepRecord::CSV_HEADER);
        for r in &self.steps {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        out
    }
}

struct Phase<'a> {
    examples: Vec<Example<'a>>,
    weights: LossWeights,
    epochs: usize,
}

#[derive(Default)]
struct Progress {
    curve: TrainingCurve,
    steps: Vec<StepRecord>,
    /// Indices into `steps` since the last curve point.
    since_eval: Vec<usize>,
    step: usize,
    done: bool,
}

impl Progress {
    fn eval_point(
        &mut self,
        params: &ModelParams<f32>,
        dev: &[Utterance],
        alphabet: &Alphabet,
        stop_at: Option<f64>,
        epoch: usize,
    ) -> Result<()> {
        if self.curve.points.last().is_some_and(|p| p.step == self.step) {
            return Ok(());
        }
        let mean = |f: fn(&StepRecord) -> Option<f64>| {
            let v: Vec<f64> = self.since_eval.iter().filter_map(|&i| f(&self.steps[i])).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let point = CurvePoint {
            step: self.step,
            epoch,
            ctc_loss: mean(|r| r.ctc_loss),
            kd_loss: mean(|r| r.kd_loss),
            dev_greedy_wer: dev_greedy_wer(params, dev, alphabet)?,
        };
        self.done |= stop_at.is_some_and(|t| point.dev_greedy_wer <= t);
        self.curve.points.push(point);
        self.since_eval.clear();
        Ok(())
    }
}

fn run_phase(
    cfg: &ScenarioConfig,
    alphabet: &Alphabet,
    dev: &[Utterance],
    params: &mut ModelParams<f32>,
    progress: &mut Progress,
    phase: &Phase<'_>,
    mut epoch: usize,
) -> Result<usize> {
    let per_epoch = phase.examples.len().div_ceil(cfg.batch_size);
    let optim = match cfg.optim.schedule {
        Schedule::WarmupPoly { total: 0, .. } => cfg.optim.with_total_steps(per_epoch * phase.epochs),
        _ => cfg.optim,
    };
    let opts = EpochOptions {
        batch_size: cfg.batch_size,
        weights: phase.weights,
        optim,
        clip_norm: cfg.clip_norm,
        seed: cfg.seed,
    };
    let mut state = OptimState::new(params.num_params());
    for _ in 0..phase.epochs {
        if progress.done {
            break;
        }
        epoch += 1;
        let first = progress.step;
        train_epoch(params, &mut state, &phase.examples, &opts, epoch, first, |p, rec| {
            progress.step = rec.step;
            progress.since_eval.push(progress.steps.len());
            progress.steps.push(rec.clone());
            let capped = cfg.max_steps.is_some_and(|m| rec.step >= m);
            if capped || (cfg.eval_every > 0 && rec.step % cfg.eval_every == 0) {
                progress.eval_point(p, dev, alphabet, cfg.stop_at_wer, epoch)?;
            }
            progress.done |= capped;
            Ok(progress.done)
        })?;
        progress.eval_point(params, dev, alphabet, cfg.stop_at_wer, epoch)?;
    }
    Ok(epoch)
}

/// Trains `init` under one of the three scenarios, evaluating greedy dev WER
/// at step 0 and then on the configured cadence.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    alphabet: &Alphabet,
    init: ModelParams<f32>,
    train: &[Utterance],
    dev: &[Utterance],
) -> Result<ScenarioOutcome> {
    cfg.validate()?;
    let unsupervised = |epochs| -> Result<Phase<'_>> {
        Ok(Phase {
            examples: prepare_examples(train, alphabet, TargetSource::Teacher, true)?,
            weights: cfg.weights,
            epochs,
        })
    };
    fn supervised<'u>(subset: &'u [Utterance], alphabet: &Alphabet, epochs: usize) -> Result<Phase<'u>> {
        let teacher = subset.iter().all(|u| u.teacher_posteriors.is_some());
        Ok(Phase {
            examples: prepare_examples(subset, alphabet, TargetSource::GroundTruth, teacher)?,
            weights: LossWeights::ctc_only(),
            epochs,
        })
    }

    let finetune_set: Vec<Utterance>;
    let phases: Vec<Phase<'_>> = match cfg.scenario {
        Scenario::FullSupervision => vec![supervised(train, alphabet, cfg.epochs)?],
        Scenario::NoSupervision => vec![unsupervised(cfg.epochs)?],
        Scenario::PretrainFinetune => {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED));
            let keep = ((train.len() as f64 * cfg.finetune_fraction).ceil() as usize).clamp(1, train.len().max(1));
            let mut chosen: Vec<usize> = order.into_iter().take(keep).collect();
            chosen.sort_unstable();
            finetune_set = chosen.into_iter().map(|i| train[i].clone()).collect();
            let mut phases = vec![unsupervised(cfg.epochs)?];
            if cfg.finetune_epochs > 0 {
                phases.push(supervised(&finetune_set, alphabet, cfg.finetune_epochs)?);
            }
            phases
        }
    };

    let mut params = init;
    let mut progress = Progress::default();
    let probe = &phases[0].examples[..phases[0].examples.len().min(64)];
    let (ctc0, kd0) = evaluate_losses(&params, probe, phases[0].weights)?;
    let wer0 = dev_greedy_wer(&params, dev, alphabet)?;
    progress.curve.points.push(CurvePoint {
        step: 0,
        epoch: 0,
        ctc_loss: ctc0,
        kd_loss: kd0,
        dev_greedy_wer: wer0,
    });
    progress.done = cfg.stop_at_wer.is_some_and(|t| wer0 <= t);

    let mut epoch = 0;
    for phase in &phases {
        epoch = run_phase(cfg, alphabet, dev, &mut params, &mut progress, phase, epoch)?;
    }
    Ok(ScenarioOutcome {
        curve: progress.curve,
        steps: progress.steps,
        params,
    })
}
