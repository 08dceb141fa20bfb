//! Instrumented decoder-only transformer.
//!
//! Pre-LN blocks, learned positional embeddings, GELU MLP with 4x expansion.
//! Every attention head can be captured or patched at its pre-projection
//! output (the attention-weighted value vector, before the heads are mixed
//! by the output projection).

mod checkpoint;
mod forward;
mod params;
mod taps;
mod train;

use std::sync::atomic::{AtomicU64, Ordering};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use params::{LayerParams, ModelConfig, Parameters};
pub use taps::{ForwardTrace, HeadLocation, Patch, PatchPosition, TapSet};
pub use train::{train, train_from, AdamConfig, TrainReport};

use crate::error::{Error, Result};
use crate::math::{log_sum_exp, Tensor};

/// A token sequence with next-token targets: `(position, token)` means the
/// logits at `position` should predict `token`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSequence {
    pub tokens: Vec<u32>,
    pub targets: Vec<(usize, u32)>,
}

/// Parameters plus a forward-pass counter.
#[derive(Debug)]
pub struct Model {
    params: Parameters,
    passes: AtomicU64,
}

impl Clone for Model {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            passes: AtomicU64::new(self.passes()),
        }
    }
}

impl Model {
    pub fn new(params: Parameters) -> Result<Self> {
        params.config.validate()?;
        Ok(Self {
            params,
            passes: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn into_params(self) -> Parameters {
        self.params
    }

    /// Forward passes run so far; one per input sequence.
    pub fn passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32]) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::Empty("token sequence"));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Vocab {
            token: bad,
            vocab: cfg.vocab_size,
        });
    }
    Ok(())
}

impl Model {
    pub fn forward(&self, tokens: &[u32], taps: &TapSet) -> Result<ForwardTrace> {
        let mut out = self.forward_batch(&[tokens], taps)?;
        Ok(out.pop().expect("one trace per sequence"))
    }

    /// Runs independent sequences; sequences of equal length share GEMMs.
    /// The same taps apply to every sequence.
    pub fn forward_batch(&self, seqs: &[&[u32]], taps: &TapSet) -> Result<Vec<ForwardTrace>> {
        let cfg = self.config();
        taps.validate(cfg)?;
        for s in seqs {
            check_tokens(cfg, s)?;
            for p in taps.patches().values() {
                if let PatchPosition::From(pos) = p.position {
                    if pos >= s.len() {
                        return Err(Error::Invalid(format!(
                            "patch start {pos} beyond sequence of length {}",
                            s.len()
                        )));
                    }
                }
            }
        }
        let mut out: Vec<Option<ForwardTrace>> = vec![None; seqs.len()];
        for group in group_by_len(seqs.iter().map(|s| s.len())) {
            let batch: Vec<&[u32]> = group.iter().map(|&i| seqs[i]).collect();
            let res = forward::run_group(&self.params, &batch, taps, false)?;
            let t = batch[0].len();
            let v = cfg.vocab_size;
            for (bi, (idx, captured)) in group.iter().zip(res.captured).enumerate() {
                let logits =
                    Tensor::from_vec(&[t, v], res.logits[bi * t * v..(bi + 1) * t * v].to_vec())?;
                out[*idx] = Some(ForwardTrace { logits, captured });
            }
        }
        self.passes.fetch_add(seqs.len() as u64, Ordering::Relaxed);
        Ok(out
            .into_iter()
            .map(|t| t.expect("every index grouped"))
            .collect())
    }
}

/// Indices grouped by equal length, groups ordered by first occurrence.
fn group_by_len(lens: impl Iterator<Item = usize>) -> Vec<Vec<usize>> {
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, len) in lens.enumerate() {
        match groups.iter_mut().find(|(l, _)| *l == len) {
            Some((_, g)) => g.push(i),
            None => groups.push((len, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Mean token-level cross-entropy over the answer positions only.
pub fn loss(trace: &ForwardTrace, positions: &[usize], targets: &[u32]) -> Result<f64> {
    if positions.is_empty() {
        return Err(Error::Empty("answer span"));
    }
    if positions.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} answer positions but {} answer tokens",
            positions.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (&p, &tok) in positions.iter().zip(targets) {
        if p >= trace.seq_len() || tok as usize >= trace.logits.cols() {
            return Err(Error::Invalid(format!(
                "answer (position {p}, token {tok}) outside logits {:?}",
                trace.logits.shape()
            )));
        }
        let row = trace.logits.row(p);
        total += log_sum_exp(row) - row[tok as usize];
    }
    Ok(total / positions.len() as f64)
}

/// Loss and gradients of the mean cross-entropy over every target in the batch.
pub fn backward(params: &Parameters, batch: &[ScoredSequence]) -> Result<(f64, Parameters)> {
    params.config.validate()?;
    let total: usize = batch.iter().map(|s| s.targets.len()).sum();
    if total == 0 {
        return Err(Error::Empty("training targets"));
    }
    for s in batch {
        check_tokens(&params.config, &s.tokens)?;
        for &(p, tok) in &s.targets {
            if p >= s.tokens.len() || tok as usize >= params.config.vocab_size {
                return Err(Error::Invalid(format!("bad target ({p}, {tok})")));
            }
        }
    }
    let mut grads = Parameters::zeros(&params.config);
    let mut loss = 0.0;
    for group in group_by_len(batch.iter().map(|s| s.tokens.len())) {
        let seqs: Vec<&[u32]> = group.iter().map(|&i| batch[i].tokens.as_slice()).collect();
        let targets: Vec<&[(usize, u32)]> =
            group.iter().map(|&i| batch[i].targets.as_slice()).collect();
        loss += forward::group_loss_and_grad(params, &mut grads, &seqs, &targets, total)?;
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests;
