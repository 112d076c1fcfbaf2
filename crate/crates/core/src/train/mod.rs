//! Optimizer, training loop and the three training scenarios.

mod data;
mod epoch;
mod optim;
mod scenario;

pub use data::{make_batches, prepare_examples, Example, TargetSource};
pub use epoch::{
    dev_greedy_wer, evaluate_losses, greedy_transcripts, train_epoch, EpochMetrics, EpochOptions, StepRecord,
    DEFAULT_CLIP_NORM,
};
pub use optim::{clip_global_norm, optimizer_step, AdamConfig, OptimState, Schedule, DEFAULT_WARMUP_STEPS};
pub use scenario::{
    run_scenario, CurvePoint, Scenario, ScenarioConfig, ScenarioOutcome, TrainingCurve, DEFAULT_FINETUNE_FRACTION,
};

#[cfg(test)]
mod tests;
