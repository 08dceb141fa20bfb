//! REINFORCE selection over bank candidates.
//!
//! Each sensitive location `k` carries logits `α_k ∈ R^M`; a sample draws one
//! bank index per location, the patched model is scored on query-only
//! prompts, and the logits follow the normalized-advantage policy gradient.
//! The final plan takes the argmax at every location.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::ActivationBank;
use crate::error::{Error, Result};
use crate::math::{argmax_with_ties, mean, softmax_rows, std_dev, RngState, Tensor};
use crate::model::{loss, Model, PatchPosition, TapSet};
use crate::sensitivity::LocationSet;
use crate::store::{read_container, write_container};
use crate::tasks::{Prompt, Task};

pub const PLAN_FORMAT: &str = "stv-plan";
pub const PLAN_VERSION: u32 = 1;

/// Per-location logits, `[K, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub logits: Tensor,
}

impl PolicyParams {
    pub fn uniform(k: usize, m: usize) -> Self {
        Self {
            logits: Tensor::zeros(&[k, m]),
        }
    }
}

/// Row-wise softmax of the logits.
pub fn distributions(policy: &PolicyParams) -> Result<Tensor> {
    softmax_rows(&policy.logits)
}

/// Exponential moving averages of the reward mean and spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBaseline {
    pub mean: f64,
    pub std: f64,
    pub eps: f64,
    pub decay: f64,
    pub initialized: bool,
}

impl RewardBaseline {
    pub fn new(decay: f64, eps: f64) -> Self {
        Self {
            mean: 0.0,
            std: 0.0,
            eps,
            decay,
            initialized: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionSample {
    pub indices: Vec<usize>,
    pub log_prob: f64,
    pub reward: f64,
}

/// One categorical draw per location; `reward` is left at zero.
pub fn sample(policy: &PolicyParams, rng: &mut RngState) -> Result<SelectionSample> {
    let probs = distributions(policy)?;
    let mut indices = Vec::with_capacity(probs.rows());
    let mut log_prob = 0.0;
    for k in 0..probs.rows() {
        let row = probs.row(k);
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut pick = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = j;
                break;
            }
        }
        log_prob += row[pick].ln();
        indices.push(pick);
    }
    Ok(SelectionSample {
        indices,
        log_prob,
        reward: 0.0,
    })
}

/// Patches that write `vectors[k]` at `locations[k]` from `start` onwards.
pub fn patch_taps(locations: &LocationSet, vectors: &[Vec<f64>], start: PatchPosition) -> TapSet {
    locations
        .iter()
        .zip(vectors)
        .fold(TapSet::new(), |t, (&loc, v)| t.patch(loc, v.clone(), start))
}

/// Negative mean answer cross-entropy over query-only prompts, with the
/// chosen bank vectors patched in at the last query position and after.
pub fn reward(
    model: &Model,
    bank: &ActivationBank,
    indices: &[usize],
    batch: &[Prompt],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("reward batch"));
    }
    if indices.len() != bank.locations.len() {
        return Err(Error::Dimension(format!(
            "{} indices for {} locations",
            indices.len(),
            bank.locations.len()
        )));
    }
    let m = bank.clusters();
    if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
        return Err(Error::Invalid(format!(
            "bank index {bad} out of {m} clusters"
        )));
    }
    let vectors: Vec<Vec<f64>> = indices
        .iter()
        .enumerate()
        .map(|(k, &i)| bank.candidate(k, i).to_vec())
        .collect();
    vector_reward(model, &bank.locations, &vectors, batch)
}

/// [`reward`] for arbitrary vectors.
pub fn vector_reward(
    model: &Model,
    locations: &LocationSet,
    vectors: &[Vec<f64>],
    batch: &[Prompt],
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("reward batch"));
    }
    // Query blocks share one length, so the patch start is common.
    let inputs: Vec<Vec<u32>> = batch.iter().map(|p| p.query_tokens()).collect();
    let start = inputs[0].len() - 1;
    if inputs.iter().any(|i| i.len() != start + 1) {
        return Err(Error::Invalid(
            "reward prompts differ in query length".into(),
        ));
    }
    let scored: Vec<_> = batch
        .iter()
        .zip(inputs)
        .map(|(p, input)| p.scored(input))
        .collect();
    let taps = patch_taps(locations, vectors, PatchPosition::From(start));
    let seqs: Vec<&[u32]> = scored.iter().map(|s| s.tokens.as_slice()).collect();
    let traces = model.forward_batch(&seqs, &taps)?;
    let mut total = 0.0;
    for (tr, s) in traces.iter().zip(&scored) {
        let (pos, tok): (Vec<usize>, Vec<u32>) = s.targets.iter().copied().unzip();
        total += loss(tr, &pos, &tok)?;
    }
    Ok(-total / batch.len() as f64)
}

/// `L = -Σ_i adv_i Σ_k log p_k[i_k]` for fixed samples.
pub fn policy_loss(
    policy: &PolicyParams,
    samples: &[SelectionSample],
    advantages: &[f64],
) -> Result<f64> {
    let probs = distributions(policy)?;
    let mut l = 0.0;
    for (s, &a) in samples.iter().zip(advantages) {
        let lp: f64 = s
            .indices
            .iter()
            .enumerate()
            .map(|(k, &i)| probs.get(k, i).ln())
            .sum();
        l -= lp * a;
    }
    Ok(l)
}

/// `∂L/∂α_k = Σ_i adv_i (p_k - onehot(i_k))`.
pub fn policy_gradient(
    policy: &PolicyParams,
    samples: &[SelectionSample],
    advantages: &[f64],
) -> Result<Tensor> {
    let probs = distributions(policy)?;
    let mut grad = Tensor::zeros(probs.shape());
    for (s, &a) in samples.iter().zip(advantages) {
        for (k, &i) in s.indices.iter().enumerate() {
            for (g, p) in grad.row_mut(k).iter_mut().zip(probs.row(k)) {
                *g += a * p;
            }
            let g = grad.get(k, i);
            grad.set(k, i, g - a);
        }
    }
    Ok(grad)
}

/// Normalizes rewards with the baseline as it was before this batch (fit to
/// the batch itself on the very first call), takes one descent step on the
/// logits, then folds the batch into the moving averages. Returns the advantages.
pub fn policy_step(
    policy: &mut PolicyParams,
    baseline: &mut RewardBaseline,
    samples: &[SelectionSample],
    lr: f64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("policy batch"));
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let (batch_mean, batch_std) = (mean(&rewards), std_dev(&rewards));
    if !baseline.initialized {
        baseline.mean = batch_mean;
        baseline.std = batch_std;
        baseline.initialized = true;
    }
    let advantages: Vec<f64> = rewards
        .iter()
        .map(|r| (r - baseline.mean) / (baseline.std + baseline.eps))
        .collect();
    if advantages.iter().any(|a| !a.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite advantage from rewards {rewards:?}"
        )));
    }
    let grad = policy_gradient(policy, samples, &advantages)?;
    for (a, g) in policy.logits.data_mut().iter_mut().zip(grad.data()) {
        *a -= lr * g;
    }
    let b = baseline.decay;
    baseline.mean = b * baseline.mean + (1.0 - b) * batch_mean;
    baseline.std = b * baseline.std + (1.0 - b) * batch_std;
    Ok(advantages)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub episodes: usize,
    /// Index sets sampled per episode.
    pub samples: usize,
    /// Query-only prompts per reward evaluation.
    pub reward_batch: usize,
    pub lr: f64,
    pub baseline_decay: f64,
    pub eps: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            samples: 8,
            reward_batch: 8,
            lr: 0.05,
            baseline_decay: 0.9,
            eps: 1e-5,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 || self.reward_batch == 0 {
            return Err(Error::Config(
                "selection samples and reward_batch must be positive".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "selection lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config("baseline_decay must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub episode: usize,
    pub mean_reward: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
}

#[derive(Clone, Debug)]
pub struct SelectionRun {
    pub policy: PolicyParams,
    pub curve: Vec<EpisodeStats>,
}

/// Sample, score, update for `cfg.episodes` episodes. Episode `e` uses
/// substream `e` of `rng` for its reward prompts and index draws.
pub fn train_selection(
    model: &Model,
    bank: &ActivationBank,
    task: &Task,
    pool: &[usize],
    cfg: &SelectionConfig,
    rng: &RngState,
) -> Result<SelectionRun> {
    cfg.validate()?;
    let mut policy = PolicyParams::uniform(bank.locations.len(), bank.clusters());
    let mut baseline = RewardBaseline::new(cfg.baseline_decay, cfg.eps);
    let mut curve = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut ep = rng.substream(e as u64);
        let batch: Vec<Prompt> = (0..cfg.reward_batch)
            .map(|_| task.prompt_from_pool(pool, 0, &mut ep))
            .collect::<Result<_>>()?;
        let mut samples = Vec::with_capacity(cfg.samples);
        for _ in 0..cfg.samples {
            let mut s = sample(&policy, &mut ep)?;
            s.reward = reward(model, bank, &s.indices, &batch)?;
            samples.push(s);
        }
        policy_step(&mut policy, &mut baseline, &samples, cfg.lr)?;
        let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
        curve.push(EpisodeStats {
            episode: e,
            mean_reward: mean(&rewards),
            baseline_mean: baseline.mean,
            baseline_std: baseline.std,
        });
    }
    Ok(SelectionRun { policy, curve })
}

pub fn write_curve(curve: &[EpisodeStats], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Plans
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanProvenance {
    pub method: String,
    pub source: String,
}

/// Locations and the vectors written into them at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionPlan {
    pub locations: LocationSet,
    pub vectors: Vec<Vec<f64>>,
    /// Bank indices when the vectors came from a bank.
    pub indices: Option<Vec<usize>>,
    pub provenance: PlanProvenance,
}

#[derive(Serialize, Deserialize)]
struct PlanHeader {
    locations: LocationSet,
    indices: Option<Vec<usize>>,
    d_head: usize,
    provenance: PlanProvenance,
}

impl InterventionPlan {
    pub fn empty() -> Self {
        Self {
            locations: LocationSet(Vec::new()),
            vectors: Vec::new(),
            indices: None,
            provenance: PlanProvenance::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn taps(&self, start: PatchPosition) -> TapSet {
        patch_taps(&self.locations, &self.vectors, start)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let d_head = self.vectors.first().map_or(0, |v| v.len());
        let header = PlanHeader {
            locations: self.locations.clone(),
            indices: self.indices.clone(),
            d_head,
            provenance: self.provenance.clone(),
        };
        let payload: Vec<f64> = self.vectors.concat();
        write_container(path, PLAN_FORMAT, PLAN_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (PlanHeader, _) = read_container(path, PLAN_FORMAT, PLAN_VERSION)?;
        if payload.len() != h.d_head * h.locations.len() {
            return Err(Error::Format(format!(
                "{}: payload does not match {} locations of width {}",
                path.display(),
                h.locations.len(),
                h.d_head
            )));
        }
        let vectors = if h.d_head == 0 {
            vec![Vec::new(); h.locations.len()]
        } else {
            payload.chunks(h.d_head).map(|c| c.to_vec()).collect()
        };
        Ok(Self {
            locations: h.locations,
            vectors,
            indices: h.indices,
            provenance: h.provenance,
        })
    }
}

/// Argmax index per location (lowest index on ties), vectors copied from the bank.
pub fn finalize(policy: &PolicyParams, bank: &ActivationBank) -> Result<InterventionPlan> {
    let (k, m) = (policy.logits.rows(), policy.logits.cols());
    if k != bank.locations.len() || m != bank.clusters() {
        return Err(Error::Dimension(format!(
            "policy is {k}x{m} but bank has {} locations x {} clusters",
            bank.locations.len(),
            bank.clusters()
        )));
    }
    let indices: Vec<usize> = (0..k)
        .map(|r| argmax_with_ties(policy.logits.row(r)))
        .collect::<Result<_>>()?;
    let vectors = indices
        .iter()
        .enumerate()
        .map(|(r, &i)| bank.candidate(r, i).to_vec())
        .collect();
    Ok(InterventionPlan {
        locations: bank.locations.clone(),
        vectors,
        indices: Some(indices),
        provenance: PlanProvenance {
            method: "stv".into(),
            source: bank.provenance.task.clone(),
        },
    })
}
