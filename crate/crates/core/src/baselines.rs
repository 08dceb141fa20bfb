//! Comparison methods: zero-shot, few-shot prompting, mean vectors at random
//! or sensitive heads, and a principal-component vector at a fixed layer.

use serde::{Deserialize, Serialize};

use crate::bank::{collect, ActivationSamples};
use crate::error::{Error, Result};
use crate::intervene::{evaluate, EvalReport};
use crate::math::{gemm, l2_norm_slice, RngState, Tensor};
use crate::model::{HeadLocation, Model};
use crate::policy::{vector_reward, InterventionPlan, PlanProvenance};
use crate::sensitivity::LocationSet;
use crate::tasks::{Prompt, QueryPools, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BaselineSpec {
    ZeroShot,
    FewShotIcl {
        shots: usize,
    },
    /// Mean vectors at the best of `candidates` random `k`-head sets.
    MeanVectorRandomLoc {
        k: usize,
        candidates: usize,
    },
    /// Mean vectors at the given heads.
    MeanVectorSensitiveLoc {
        locations: LocationSet,
    },
    /// First principal component across all heads of one layer
    /// (`None` means the middle layer).
    PcaVectorFixedLayer {
        layer: Option<usize>,
    },
}

impl BaselineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::ZeroShot => "zero-shot",
            BaselineSpec::FewShotIcl { .. } => "few-shot-icl",
            BaselineSpec::MeanVectorRandomLoc { .. } => "mtv-lite",
            BaselineSpec::MeanVectorSensitiveLoc { .. } => "mean-at-sensitive",
            BaselineSpec::PcaVectorFixedLayer { .. } => "icv-lite",
        }
    }
}

/// Everything a baseline shares with the main pipeline.
#[derive(Clone, Copy, Debug)]
pub struct BaselineInputs<'a> {
    pub model: &'a Model,
    pub task: &'a Task,
    pub pools: &'a QueryPools,
    /// Demonstrations per context prompt when collecting activations.
    pub shots: usize,
    pub n_samples: usize,
    pub reward_batch: usize,
    pub max_new_tokens: usize,
}

/// One prompt per query of `pool`, in pool order; query `i` draws its
/// demonstrations from substream `i`.
pub fn eval_prompts(
    task: &Task,
    pool: &[usize],
    shots: usize,
    rng: &RngState,
) -> Result<Vec<Prompt>> {
    pool.iter()
        .enumerate()
        .map(|(i, &q)| task.prompt_for(q, shots, &mut rng.substream(i as u64)))
        .collect()
}

/// Per-location sample means: the `M = 1` bank.
pub fn mean_vectors(samples: &ActivationSamples) -> Vec<Vec<f64>> {
    samples
        .rows
        .iter()
        .map(|pts| {
            let n = pts.rows() as f64;
            (0..pts.cols())
                .map(|j| (0..pts.rows()).map(|i| pts.get(i, j)).sum::<f64>() / n)
                .collect()
        })
        .collect()
}

fn mean_plan(samples: &ActivationSamples, method: &str) -> InterventionPlan {
    InterventionPlan {
        locations: samples.locations.clone(),
        vectors: mean_vectors(samples),
        indices: None,
        provenance: PlanProvenance {
            method: method.into(),
            source: "mean".into(),
        },
    }
}

/// Streams used by [`build_plan`]: `collect` for context activations,
/// `search` for random location sets and their reward prompts.
pub fn build_plan(
    spec: &BaselineSpec,
    inp: &BaselineInputs,
    rng: &RngState,
) -> Result<InterventionPlan> {
    let cfg = inp.model.config();
    let collect_all = |locs: &LocationSet| {
        collect(
            inp.model,
            inp.task,
            locs,
            &inp.pools.train,
            inp.n_samples,
            inp.shots,
            &rng.derive("collect"),
        )
    };
    match spec {
        BaselineSpec::ZeroShot | BaselineSpec::FewShotIcl { .. } => Ok(InterventionPlan::empty()),
        BaselineSpec::MeanVectorSensitiveLoc { locations } => {
            Ok(mean_plan(&collect_all(locations)?, spec.name()))
        }
        BaselineSpec::MeanVectorRandomLoc { k, candidates } => {
            let all = HeadLocation::all(cfg);
            if *k == 0 || *k > all.len() || *candidates == 0 {
                return Err(Error::Config(format!(
                    "random search needs 1 <= k <= {} and candidates >= 1",
                    all.len()
                )));
            }
            let samples = collect_all(&LocationSet(all.clone()))?;
            let means = mean_vectors(&samples);
            let search = rng.derive("search");
            let mut best: Option<(f64, Vec<usize>)> = None;
            for r in 0..*candidates {
                let mut s = search.substream(r as u64);
                let mut pick = s.distinct(all.len(), *k);
                pick.sort_unstable();
                let batch: Vec<Prompt> = (0..inp.reward_batch)
                    .map(|_| inp.task.prompt_from_pool(&inp.pools.train, 0, &mut s))
                    .collect::<Result<_>>()?;
                let locs = LocationSet(pick.iter().map(|&i| all[i]).collect());
                let vecs: Vec<Vec<f64>> = pick.iter().map(|&i| means[i].clone()).collect();
                let rew = vector_reward(inp.model, &locs, &vecs, &batch)?;
                if best.as_ref().is_none_or(|(b, _)| rew > *b) {
                    best = Some((rew, pick));
                }
            }
            let (_, pick) = best.expect("candidates >= 1");
            Ok(InterventionPlan {
                locations: LocationSet(pick.iter().map(|&i| all[i]).collect()),
                vectors: pick.iter().map(|&i| means[i].clone()).collect(),
                indices: None,
                provenance: PlanProvenance {
                    method: spec.name().into(),
                    source: format!("best of {candidates} random sets"),
                },
            })
        }
        BaselineSpec::PcaVectorFixedLayer { layer } => {
            let layer = layer.unwrap_or(cfg.n_layers / 2);
            if layer >= cfg.n_layers {
                return Err(Error::Config(format!(
                    "layer {layer} out of {}",
                    cfg.n_layers
                )));
            }
            let locs = LocationSet(
                (0..cfg.n_heads)
                    .map(|h| HeadLocation::new(layer, h))
                    .collect(),
            );
            let samples = collect_all(&locs)?;
            let n = samples.n_samples();
            let dh = cfg.d_head();
            // Concatenate the heads of each sample into one layer-wide row.
            let mut rows = vec![0.0; n * cfg.d_model];
            for (h, pts) in samples.rows.iter().enumerate() {
                for i in 0..n {
                    rows[i * cfg.d_model + h * dh..][..dh].copy_from_slice(pts.row(i));
                }
            }
            let points = Tensor::from_vec(&[n, cfg.d_model], rows)?;
            let pc = pca_first_component(&points)?;
            let scale = (0..n).map(|i| l2_norm_slice(points.row(i))).sum::<f64>() / n as f64;
            let vectors = (0..cfg.n_heads)
                .map(|h| {
                    pc.component[h * dh..(h + 1) * dh]
                        .iter()
                        .map(|v| v * scale)
                        .collect()
                })
                .collect();
            Ok(InterventionPlan {
                locations: locs,
                vectors,
                indices: None,
                provenance: PlanProvenance {
                    method: spec.name().into(),
                    source: format!("layer {layer} first component"),
                },
            })
        }
    }
}

/// Builds the method's plan and evaluates it on the test pool. Evaluation
/// prompts come from the `eval` stream so every method sees the same queries.
pub fn run_baseline(
    spec: &BaselineSpec,
    inp: &BaselineInputs,
    rng: &RngState,
) -> Result<EvalReport> {
    let plan = build_plan(spec, inp, rng)?;
    let shots = match spec {
        BaselineSpec::FewShotIcl { shots } => *shots,
        _ => 0,
    };
    let prompts = eval_prompts(inp.task, &inp.pools.test, shots, &rng.derive("eval"))?;
    evaluate(inp.model, spec.name(), &plan, &prompts, inp.max_new_tokens)
}

// ---------------------------------------------------------------------------
// PCA
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Principal {
    /// Unit vector; its largest-magnitude entry is positive.
    pub component: Vec<f64>,
    pub eigenvalue: f64,
    /// Trace of the covariance.
    pub total_variance: f64,
}

pub const PCA_TOL: f64 = 1e-10;
pub const PCA_MAX_ITERS: usize = 1000;

/// Top eigenvector of the sample covariance by power iteration.
pub fn pca_first_component(points: &Tensor) -> Result<Principal> {
    let (n, d) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::Invalid("PCA needs at least two points".into()));
    }
    let mut x = points.data().to_vec();
    for j in 0..d {
        let m = (0..n).map(|i| x[i * d + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            x[i * d + j] -= m;
        }
    }
    let mut cov = vec![0.0; d * d];
    gemm(
        true,
        false,
        d,
        d,
        n,
        1.0 / (n - 1) as f64,
        &x,
        &x,
        0.0,
        &mut cov,
    );
    let total: f64 = (0..d).map(|j| cov[j * d + j]).sum();
    if !(total > 0.0) {
        return Err(Error::Invalid("PCA input has zero variance".into()));
    }
    // Start from the highest-variance coordinate's covariance column.
    let j0 = (0..d)
        .max_by(|&a, &b| cov[a * d + a].total_cmp(&cov[b * d + b]).then(b.cmp(&a)))
        .expect("d >= 1");
    let mut v: Vec<f64> = (0..d).map(|i| cov[i * d + j0]).collect();
    normalize(&mut v);
    let mut next = vec![0.0; d];
    for _ in 0..PCA_MAX_ITERS {
        gemm(false, false, d, 1, d, 1.0, &cov, &v, 0.0, &mut next);
        if l2_norm_slice(&next) == 0.0 {
            break;
        }
        normalize(&mut next);
        let delta = v
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut v, &mut next);
        if delta < PCA_TOL {
            break;
        }
    }
    let big = (0..d)
        .max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()).then(b.cmp(&a)))
        .expect("d >= 1");
    if v[big] < 0.0 {
        v.iter_mut().for_each(|e| *e = -*e);
    }
    gemm(false, false, d, 1, d, 1.0, &cov, &v, 0.0, &mut next);
    let eigenvalue = v.iter().zip(&next).map(|(a, b)| a * b).sum();
    Ok(Principal {
        component: v,
        eigenvalue,
        total_variance: total,
    })
}

fn normalize(v: &mut [f64]) {
    let n = l2_norm_slice(v);
    if n > 0.0 {
        v.iter_mut().for_each(|e| *e /= n);
    }
}
