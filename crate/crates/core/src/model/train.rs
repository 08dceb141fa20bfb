use serde::{Deserialize, Serialize};

use super::{backward, ModelConfig, Parameters, ScoredSequence};
use crate::error::{Error, Result};
use crate::math::RngState;

/// Adam with linear warmup, optional cosine decay and global-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: usize,
    /// Final learning rate as a fraction of `lr` under cosine decay; 1.0 disables decay.
    pub final_lr_ratio: f64,
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 200,
            final_lr_ratio: 1.0,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.final_lr_ratio >= 1.0 || total <= self.warmup_steps {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (total - self.warmup_steps) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos());
        self.lr * (self.final_lr_ratio + (1.0 - self.final_lr_ratio) * cos)
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: Parameters,
    /// Training loss per step.
    pub losses: Vec<f64>,
}

struct Adam {
    m: Parameters,
    v: Parameters,
    t: i32,
}

impl Adam {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: Parameters::zeros(cfg),
            v: Parameters::zeros(cfg),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut Parameters, grads: &Parameters, hp: &AdamConfig, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t);
        let bc2 = 1.0 - hp.beta2.powi(self.t);
        let groups = params
            .named_mut()
            .into_iter()
            .zip(grads.named())
            .zip(self.m.named_mut())
            .zip(self.v.named_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in groups {
            let p = p.data_mut();
            let m = m.data_mut();
            let v = v.data_mut();
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + hp.eps);
            }
        }
    }
}

/// Trains from a fresh initialization drawn from `rng`'s `init` stream.
///
/// `batches` yields one training batch per step from the `data` stream, so
/// the result is a pure function of the seed.
pub fn train<F>(
    config: &ModelConfig,
    mut batches: F,
    steps: usize,
    hp: &AdamConfig,
    rng: &RngState,
) -> Result<TrainReport>
where
    F: FnMut(&mut RngState) -> Result<Vec<ScoredSequence>>,
{
    let params = Parameters::init(config, &mut rng.derive("init"))?;
    train_from(params, &mut batches, steps, hp, rng)
}

/// Continues training existing parameters.
pub fn train_from<F>(
    mut params: Parameters,
    batches: &mut F,
    steps: usize,
    hp: &AdamConfig,
    rng: &RngState,
) -> Result<TrainReport>
where
    F: FnMut(&mut RngState) -> Result<Vec<ScoredSequence>>,
{
    let mut data_rng = rng.derive("data");
    let mut adam = Adam::new(&params.config);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch = batches(&mut data_rng)?;
        let (loss, mut grads) = backward(&params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss}"
            )));
        }
        if let Some(max) = hp.clip_norm {
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient norm at step {step}"
                )));
            }
            if norm > max {
                grads.scale(max / norm);
            }
        }
        adam.step(&mut params, &grads, hp, hp.lr_at(step, steps));
        losses.push(loss);
        if step % 500 == 0 || step + 1 == steps {
            log::info!("step {step:>6}  loss {loss:.4}");
        }
    }
    if !params.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(TrainReport { params, losses })
}
