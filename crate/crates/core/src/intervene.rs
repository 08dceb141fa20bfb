//! Inference with a patched model and evaluation reports.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::argmax_with_ties;
use crate::model::{Model, PatchPosition};
use crate::policy::InterventionPlan;
use crate::tasks::{Prompt, TOK_SEP};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 20;

/// Greedy decoding of up to `max_new_tokens` tokens, stopping before a
/// separator. Plan vectors are written at the last input position and at
/// every generated position, so the input itself is never extended.
/// Returns the generated tokens and the number of forward passes used.
pub fn infer(
    model: &Model,
    plan: &InterventionPlan,
    input: &[u32],
    max_new_tokens: usize,
) -> Result<(Vec<u32>, u64)> {
    if input.is_empty() {
        return Err(Error::Empty("inference input"));
    }
    let taps = plan.taps(PatchPosition::From(input.len() - 1));
    let mut seq = input.to_vec();
    let mut passes = 0;
    while seq.len() - input.len() < max_new_tokens {
        if seq.len() >= model.config().max_seq_len {
            break;
        }
        let trace = model.forward(&seq, &taps)?;
        passes += 1;
        let next = argmax_with_ties(trace.last_logits())? as u32;
        if next == TOK_SEP {
            break;
        }
        seq.push(next);
    }
    debug_assert_eq!(&seq[..input.len()], input);
    Ok((seq.split_off(input.len()), passes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub prompt_id: usize,
    pub input_len: usize,
    pub prediction: Vec<u32>,
    pub gold: Vec<u32>,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub accuracy: f64,
    pub n_queries: usize,
    pub passes: u64,
    pub records: Vec<QueryRecord>,
    /// Kept out of serialized reports so result files stay byte-stable.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl EvalReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// Accuracy recomputed from the per-query records.
    pub fn recount(&self) -> f64 {
        let n = self.records.len().max(1);
        self.records.iter().filter(|r| r.correct).count() as f64 / n as f64
    }
}

/// One-token answers are scored on the first generated token, so a patched
/// model that answers correctly but does not stop still counts. Longer
/// answers must match the whole generation.
pub fn answer_matches(prediction: &[u32], gold: &[u32]) -> bool {
    match gold {
        [g] => prediction.first() == Some(g),
        _ => prediction == gold,
    }
}

/// Exact-match accuracy over `prompts`. With a non-empty plan the model sees
/// only the query block; otherwise it sees each prompt as built (so zero-shot
/// prompts are bare queries and few-shot prompts carry demonstrations).
pub fn evaluate(
    model: &Model,
    method: &str,
    plan: &InterventionPlan,
    prompts: &[Prompt],
    max_new_tokens: usize,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("evaluation pool"));
    }
    let start = Instant::now();
    let mut records = Vec::with_capacity(prompts.len());
    let mut passes = 0;
    for (id, p) in prompts.iter().enumerate() {
        let input = if plan.is_empty() {
            p.tokens()
        } else {
            p.query_tokens()
        };
        let (prediction, n) = infer(model, plan, &input, max_new_tokens)?;
        passes += n;
        records.push(QueryRecord {
            prompt_id: id,
            input_len: input.len(),
            correct: answer_matches(&prediction, &p.gold),
            prediction,
            gold: p.gold.clone(),
        });
    }
    let correct = records.iter().filter(|r| r.correct).count();
    Ok(EvalReport {
        method: method.to_string(),
        accuracy: correct as f64 / prompts.len() as f64,
        n_queries: prompts.len(),
        passes,
        records,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Forward passes spent locating where to intervene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchAccounting {
    pub pairs: usize,
    pub candidate_sets: usize,
    pub eval_batch: usize,
    /// `2 * pairs`: one query and one context pass per pair.
    pub stv_passes: u64,
    /// `candidate_sets * eval_batch`.
    pub random_search_passes: u64,
    pub ratio: f64,
}

pub fn count_search_passes(
    pairs: usize,
    candidate_sets: usize,
    eval_batch: usize,
) -> SearchAccounting {
    let stv = 2 * pairs as u64;
    let random = (candidate_sets * eval_batch) as u64;
    SearchAccounting {
        pairs,
        candidate_sets,
        eval_batch,
        stv_passes: stv,
        random_search_passes: random,
        ratio: if random == 0 {
            f64::INFINITY
        } else {
            stv as f64 / random as f64
        },
    }
}
