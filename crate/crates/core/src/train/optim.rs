use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Learning-rate multiplier as a function of the 1-based step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Linear warmup over `warmup` steps, then `(1 - progress)^power` decay
    /// reaching `floor` of the peak rate at `total` steps.
    WarmupPoly {
        warmup: usize,
        total: usize,
        power: f64,
        floor: f64,
    },
}

impl Schedule {
    pub fn factor(&self, step: u64) -> f64 {
        match *self {
            Schedule::Constant => 1.0,
            Schedule::WarmupPoly {
                warmup,
                total,
                power,
                floor,
            } => {
                let step = step as f64;
                let warmup = warmup as f64;
                if step < warmup {
                    return step / warmup;
                }
                if total as f64 <= warmup {
                    return 1.0;
                }
                let progress = ((step - warmup) / (total as f64 - warmup)).min(1.0);
                floor + (1.0 - floor) * (1.0 - progress).powf(power)
            }
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
}

pub const DEFAULT_WARMUP_STEPS: usize = 200;

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 1e-3,
            schedule: Schedule::WarmupPoly {
                warmup: DEFAULT_WARMUP_STEPS,
                total: 0,
                power: 2.0,
                floor: 0.01,
            },
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !(self.lr > 0.0)
            || !unit(self.beta1)
            || !unit(self.beta2)
            || !(self.eps > 0.0)
            || !(self.weight_decay >= 0.0)
        {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let Schedule::WarmupPoly { power, floor, .. } = self.schedule {
            if !(power >= 0.0) || !(0.0..=1.0).contains(&floor) {
                return Err(Error::Config("schedule power must be >= 0 and floor in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// Same settings with the decay horizon set to `total` steps.
    pub fn with_total_steps(mut self, total_steps: usize) -> Self {
        if let Schedule::WarmupPoly { ref mut total, .. } = self.schedule {
            *total = total_steps;
        }
        self
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimState {
    pub fn new(num_params: usize) -> Self {
        OptimState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [S], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::from_f64_lossy(max_norm / norm);
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// One Adam update. `decay_mask` selects the parameters that receive weight
/// decay (all of them when `None`). Returns the learning rate used.
pub fn optimizer_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    state: &mut OptimState,
    config: &AdamConfig,
    decay_mask: Option<&[bool]>,
) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters, {} gradients, optimizer sized for {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if decay_mask.is_some_and(|m| m.len() != params.len()) {
        return Err(Error::ShapeMismatch("decay mask length differs from parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.lr * config.schedule.factor(state.step);
    for i in 0..params.len() {
        let g = grads[i].to_f64_lossy();
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = params[i].to_f64_lossy();
        let decay = if decay_mask.is_none_or(|m| m[i]) {
            config.weight_decay * p
        } else {
            0.0
        };
        params[i] = S::from_f64_lossy(p - lr * (m_hat / (v_hat.sqrt() + config.eps) + decay));
    }
    Ok(lr)
}
