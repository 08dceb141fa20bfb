use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::math::Tensor;

/// One attention head, addressed by `(layer, head)`.
///
/// Ordering is lexicographic by layer then head, which is also the
/// deterministic tie-break used wherever heads are ranked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct HeadLocation {
    pub layer: usize,
    pub head: usize,
}

impl HeadLocation {
    pub fn new(layer: usize, head: usize) -> Self {
        Self { layer, head }
    }

    /// Every head of a model in `(layer, head)` order.
    pub fn all(cfg: &ModelConfig) -> Vec<HeadLocation> {
        (0..cfg.n_layers)
            .flat_map(|l| (0..cfg.n_heads).map(move |h| HeadLocation::new(l, h)))
            .collect()
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers || self.head >= cfg.n_heads {
            return Err(Error::Invalid(format!(
                "head {self} outside a {}x{} model",
                cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }
}

impl From<(usize, usize)> for HeadLocation {
    fn from((layer, head): (usize, usize)) -> Self {
        Self { layer, head }
    }
}

impl From<HeadLocation> for (usize, usize) {
    fn from(loc: HeadLocation) -> Self {
        (loc.layer, loc.head)
    }
}

impl fmt::Display for HeadLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Which token positions a patch overwrites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchPosition {
    /// Only the last position of the sequence (the prefill read position).
    Last,
    /// Every position from the given index on. With full recomputation at
    /// each decoding step this equals patching the newest token at every
    /// step of a cached decoder, starting at the prompt's last token.
    From(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub vector: Vec<f64>,
    pub position: PatchPosition,
}

/// Capture and patch requests for one forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TapSet {
    capture: BTreeSet<HeadLocation>,
    patches: BTreeMap<HeadLocation, Patch>,
}

impl TapSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn capture(mut self, loc: HeadLocation) -> Self {
        self.capture.insert(loc);
        self
    }

    pub fn capture_many(mut self, locs: impl IntoIterator<Item = HeadLocation>) -> Self {
        self.capture.extend(locs);
        self
    }

    pub fn capture_all(self, cfg: &ModelConfig) -> Self {
        self.capture_many(HeadLocation::all(cfg))
    }

    pub fn patch(mut self, loc: HeadLocation, vector: Vec<f64>, position: PatchPosition) -> Self {
        self.patches.insert(loc, Patch { vector, position });
        self
    }

    pub fn captures(&self) -> &BTreeSet<HeadLocation> {
        &self.capture
    }

    pub fn patches(&self) -> &BTreeMap<HeadLocation, Patch> {
        &self.patches
    }

    pub fn is_empty(&self) -> bool {
        self.capture.is_empty() && self.patches.is_empty()
    }

    pub(crate) fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for loc in &self.capture {
            loc.check(cfg)?;
            if self.patches.contains_key(loc) {
                return Err(Error::Invalid(format!(
                    "head {loc} is both captured and patched"
                )));
            }
        }
        for (loc, p) in &self.patches {
            loc.check(cfg)?;
            if p.vector.len() != cfg.d_head() {
                return Err(Error::Dimension(format!(
                    "patch for {loc} has length {}, expected d_head {}",
                    p.vector.len(),
                    cfg.d_head()
                )));
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("patch for {loc} is not finite")));
            }
        }
        Ok(())
    }
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `[seq, vocab]`
    pub logits: Tensor,
    /// Pre-projection head outputs at the last position, keyed exactly by the capture set.
    pub captured: BTreeMap<HeadLocation, Vec<f64>>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }

    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.seq_len() - 1)
    }

    pub fn activation(&self, loc: HeadLocation) -> Option<&[f64]> {
        self.captured.get(&loc).map(Vec::as_slice)
    }
}
