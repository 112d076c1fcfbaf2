//! Run configuration: a TOML file with `[data]`, `[model]`, `[loss]`,
//! `[optim]`, `[decode]` and `[filter]` sections, overridden by flags and
//! echoed to every output directory.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use xmodal_core::decode::{BeamConfig, NGramConfig, DEFAULT_LM_ORDER, DESK_BEAM_WIDTH};
use xmodal_core::distill::{LossWeights, DEFAULT_LAMBDA_CTC, DEFAULT_LAMBDA_KD};
use xmodal_core::eval::{FilterThresholds, DEFAULT_MAX_AGREEMENT_WER, DEFAULT_MIN_VALID_RATIO};
use xmodal_core::teacher::GenConfig;
use xmodal_core::train::{
    AdamConfig, Scenario, ScenarioConfig, Schedule, DEFAULT_CLIP_NORM, DEFAULT_FINETUNE_FRACTION, DEFAULT_WARMUP_STEPS,
};

use crate::Invalid;

pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub decode: DecodeSection,
    pub filter: FilterSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Utterances held out as the dev set; the rest form the training set.
    pub dev_utterances: usize,
    pub corpus: GenConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            dev_utterances: 100,
            corpus: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// One of `paper`, `desk`, `compact`, `tiny`.
    pub preset: String,
    /// Initialization seed.
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            preset: "desk".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub scenario: Scenario,
    pub lambda_ctc: f64,
    pub lambda_kd: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection {
            scenario: Scenario::NoSupervision,
            lambda_ctc: DEFAULT_LAMBDA_CTC,
            lambda_kd: DEFAULT_LAMBDA_KD,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    WarmupPoly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    pub decay_power: f64,
    /// Final learning rate as a fraction of `lr`.
    pub lr_floor: f64,
    /// Decay horizon in steps; 0 derives it from the epoch count.
    pub decay_steps: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub finetune_epochs: usize,
    pub finetune_fraction: f64,
    /// Dev evaluation interval in steps; 0 evaluates at epoch ends only.
    pub eval_every: usize,
    /// Step cap across all phases; 0 means no cap.
    pub max_steps: usize,
    /// Stop once dev greedy WER reaches this value.
    pub stop_at_wer: Option<f64>,
    /// Seed for batching and dropout.
    pub seed: u64,
}

impl Default for OptimSection {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let scenario = ScenarioConfig::default();
        OptimSection {
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            schedule: ScheduleKind::WarmupPoly,
            warmup_steps: DEFAULT_WARMUP_STEPS,
            decay_power: 2.0,
            lr_floor: 0.01,
            decay_steps: 0,
            clip_norm: DEFAULT_CLIP_NORM,
            batch_size: scenario.batch_size,
            epochs: scenario.epochs,
            finetune_epochs: 0,
            finetune_fraction: DEFAULT_FINETUNE_FRACTION,
            eval_every: 0,
            max_steps: 0,
            stop_at_wer: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMethod {
    Greedy,
    Beam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeSection {
    pub method: DecodeMethod,
    pub beam_width: usize,
    pub lm_weight: f64,
    pub word_bonus: f64,
    pub prune_logp: Option<f64>,
    /// Word LM used for shallow fusion during beam search.
    pub lm: Option<PathBuf>,
    pub lm_order: usize,
    pub lm_backoff: f64,
}

impl Default for DecodeSection {
    fn default() -> Self {
        let beam = BeamConfig::default();
        let lm = NGramConfig::default();
        DecodeSection {
            method: DecodeMethod::Greedy,
            beam_width: DESK_BEAM_WIDTH,
            lm_weight: beam.lm_weight,
            word_bonus: beam.word_bonus,
            prune_logp: None,
            lm: None,
            lm_order: DEFAULT_LM_ORDER,
            lm_backoff: lm.backoff,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub min_valid_ratio: f64,
    pub max_agreement_wer: f64,
}

impl Default for FilterSection {
    fn default() -> Self {
        FilterSection {
            min_valid_ratio: DEFAULT_MIN_VALID_RATIO,
            max_agreement_wer: DEFAULT_MAX_AGREEMENT_WER,
        }
    }
}

impl RunConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig =
            toml::from_str(&text).map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the resolved configuration into `out`.
    pub fn echo(&self, out: &Path) -> anyhow::Result<()> {
        let path = out.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn weights(&self) -> xmodal_core::Result<LossWeights> {
        LossWeights::new(self.loss.lambda_ctc, self.loss.lambda_kd)
    }

    pub fn scenario(&self) -> xmodal_core::Result<ScenarioConfig> {
        let o = &self.optim;
        let schedule = match o.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::WarmupPoly => Schedule::WarmupPoly {
                warmup: o.warmup_steps,
                total: o.decay_steps,
                power: o.decay_power,
                floor: o.lr_floor,
            },
        };
        let cfg = ScenarioConfig {
            scenario: self.loss.scenario,
            weights: self.weights()?,
            epochs: o.epochs,
            finetune_epochs: o.finetune_epochs,
            finetune_fraction: o.finetune_fraction,
            batch_size: o.batch_size,
            eval_every: o.eval_every,
            seed: o.seed,
            optim: AdamConfig {
                lr: o.lr,
                beta1: o.beta1,
                beta2: o.beta2,
                eps: o.eps,
                weight_decay: o.weight_decay,
                schedule,
            },
            clip_norm: (o.clip_norm > 0.0).then_some(o.clip_norm),
            max_steps: (o.max_steps > 0).then_some(o.max_steps),
            stop_at_wer: o.stop_at_wer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn beam(&self) -> xmodal_core::Result<BeamConfig> {
        let d = &self.decode;
        let cfg = BeamConfig {
            width: d.beam_width,
            lm_weight: d.lm_weight,
            word_bonus: d.word_bonus,
            prune_logp: d.prune_logp,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn ngram(&self) -> NGramConfig {
        NGramConfig {
            order: self.decode.lm_order,
            backoff: self.decode.lm_backoff,
            ..NGramConfig::default()
        }
    }

    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            min_valid_ratio: self.filter.min_valid_ratio,
            max_agreement_wer: self.filter.max_agreement_wer,
        }
    }
}
