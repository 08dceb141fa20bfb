//! Context sensitivity of attention heads.
//!
//! For a query `q` and the same query preceded by demonstrations `c`, the
//! per-head delta is `||A_c - A_q||` at the final position. Averaging over
//! many pairs gives an `L x H` sensitivity map whose largest entries are the
//! locations where task vectors get inserted.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{l2_distance, RngState, Tensor};
use crate::model::{HeadLocation, Model, ModelConfig, TapSet};
use crate::tasks::Task;

/// Mean per-head activation delta.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaMatrix {
    /// `[L, H]`, every entry non-negative.
    pub values: Tensor,
    /// Number of (query, context) pairs averaged.
    pub pairs: usize,
    pub shots: usize,
}

impl DeltaMatrix {
    pub fn get(&self, loc: HeadLocation) -> f64 {
        self.values.get(loc.layer, loc.head)
    }
}

/// Ordered head locations, most sensitive first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationSet(pub Vec<HeadLocation>);

impl LocationSet {
    pub fn new(locs: Vec<HeadLocation>, cfg: &ModelConfig) -> Result<Self> {
        let set = Self(locs);
        set.validate(cfg)?;
        Ok(set)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for loc in &self.0 {
            loc.check(cfg)?;
            if !seen.insert(*loc) {
                return Err(Error::Invalid(format!("duplicate location {loc}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, HeadLocation> {
        self.0.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl fmt::Display for LocationSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| l.to_string()).collect();
        write!(f, "[{}]", parts.join(", "))
    }
}

fn delta_from_traces(
    cfg: &ModelConfig,
    query: &crate::model::ForwardTrace,
    context: &crate::model::ForwardTrace,
) -> Tensor {
    let mut out = Tensor::zeros(&[cfg.n_layers, cfg.n_heads]);
    for loc in HeadLocation::all(cfg) {
        let a = query.activation(loc).expect("all heads captured");
        let b = context.activation(loc).expect("all heads captured");
        out.set(loc.layer, loc.head, l2_distance(b, a));
    }
    out
}

/// Per-head `||A_context - A_query||`, one capture pass for each input.
pub fn pair_delta(model: &Model, query: &[u32], context: &[u32]) -> Result<Tensor> {
    let taps = TapSet::new().capture_all(model.config());
    let traces = model.forward_batch(&[query, context], &taps)?;
    Ok(delta_from_traces(model.config(), &traces[0], &traces[1]))
}

/// Mean of `pairs` pair deltas. Pair `t` draws its query from `pool` and its
/// demonstrations with substream `t` of `rng`, so the result does not depend
/// on evaluation order. Uses exactly `2 * pairs` forward passes.
pub fn average_delta(
    model: &Model,
    task: &Task,
    pool: &[usize],
    pairs: usize,
    shots: usize,
    rng: &RngState,
) -> Result<DeltaMatrix> {
    if pairs == 0 {
        return Err(Error::Invalid("sensitivity needs at least one pair".into()));
    }
    let cfg = model.config();
    let mut queries = Vec::with_capacity(pairs);
    let mut contexts = Vec::with_capacity(pairs);
    for t in 0..pairs {
        let prompt = task.prompt_from_pool(pool, shots, &mut rng.substream(t as u64))?;
        queries.push(prompt.query_tokens());
        contexts.push(prompt.tokens());
    }
    let taps = TapSet::new().capture_all(cfg);
    let q_refs: Vec<&[u32]> = queries.iter().map(|v| v.as_slice()).collect();
    let c_refs: Vec<&[u32]> = contexts.iter().map(|v| v.as_slice()).collect();
    let q_traces = model.forward_batch(&q_refs, &taps)?;
    let c_traces = model.forward_batch(&c_refs, &taps)?;

    let mut sum = Tensor::zeros(&[cfg.n_layers, cfg.n_heads]);
    for (q, c) in q_traces.iter().zip(&c_traces) {
        let d = delta_from_traces(cfg, q, c);
        for (s, v) in sum.data_mut().iter_mut().zip(d.data()) {
            *s += v;
        }
    }
    for s in sum.data_mut() {
        *s /= pairs as f64;
    }
    Ok(DeltaMatrix {
        values: sum,
        pairs,
        shots,
    })
}

/// The `k` largest entries over all layers and heads; ties go to the lower
/// `(layer, head)`.
pub fn top_k(delta: &DeltaMatrix, k: usize) -> Result<LocationSet> {
    let (l, h) = (delta.values.rows(), delta.values.cols());
    if k == 0 || k > l * h {
        return Err(Error::Invalid(format!(
            "K = {k} outside 1..={} head locations",
            l * h
        )));
    }
    let mut locs: Vec<HeadLocation> = (0..l)
        .flat_map(|li| (0..h).map(move |hi| HeadLocation::new(li, hi)))
        .collect();
    locs.sort_by(|a, b| {
        delta
            .get(*b)
            .total_cmp(&delta.get(*a))
            .then_with(|| a.cmp(b))
    });
    locs.truncate(k);
    Ok(LocationSet(locs))
}

/// Jaccard overlap `|A ∩ B| / |A ∪ B|`; two empty sets overlap fully.
pub fn stability_overlap(a: &LocationSet, b: &LocationSet) -> f64 {
    use std::collections::BTreeSet;
    let sa: BTreeSet<_> = a.iter().collect();
    let sb: BTreeSet<_> = b.iter().collect();
    let union = sa.union(&sb).count();
    if union == 0 {
        return 1.0;
    }
    sa.intersection(&sb).count() as f64 / union as f64
}

/// Writes the map as CSV: `#` metadata lines, a header row, then one row per layer.
pub fn export_heatmap(delta: &DeltaMatrix, seed: u64, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# pairs={}", delta.pairs)?;
    writeln!(file, "# shots={}", delta.shots)?;
    writeln!(file, "# seed={seed}")?;
    let mut w = csv::Writer::from_writer(file);
    let mut header = vec!["layer".to_string()];
    header.extend((0..delta.values.cols()).map(|h| format!("h{h}")));
    w.write_record(&header)?;
    for l in 0..delta.values.rows() {
        let mut rec = vec![l.to_string()];
        rec.extend(delta.values.row(l).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a heatmap written by [`export_heatmap`]; returns the map and seed.
pub fn read_heatmap(path: &Path) -> Result<(DeltaMatrix, u64)> {
    let text = std::fs::read_to_string(path)?;
    let bad = |m: String| Error::Format(format!("{}: {m}", path.display()));
    let mut meta = std::collections::BTreeMap::new();
    for line in text.lines().filter_map(|l| l.strip_prefix("# ")) {
        if let Some((k, v)) = line.split_once('=') {
            let v: u64 = v.parse().map_err(|_| bad(format!("bad metadata {line}")))?;
            meta.insert(k.to_string(), v);
        }
    }
    let field = |k: &str| {
        meta.get(k)
            .copied()
            .ok_or_else(|| bad(format!("missing {k}")))
    };
    let (pairs, shots, seed) = (field("pairs")?, field("shots")?, field("seed")?);
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().skip(1).map(str::parse).collect();
        rows.push(row.map_err(|e| bad(format!("bad value: {e}")))?);
    }
    Ok((
        DeltaMatrix {
            values: Tensor::from_rows(&rows)?,
            pairs: pairs as usize,
            shots: shots as usize,
        },
        seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> DeltaMatrix {
        DeltaMatrix {
            values: Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
            pairs: 1,
            shots: 4,
        }
    }

    fn locs(v: &[(usize, usize)]) -> LocationSet {
        LocationSet(v.iter().map(|&p| p.into()).collect())
    }

    #[test]
    fn top_k_small_example() {
        let d = matrix(&[&[3.0, 1.0], &[2.0, 5.0]]);
        assert_eq!(top_k(&d, 2).unwrap(), locs(&[(1, 1), (0, 0)]));
    }

    #[test]
    fn top_k_rejects_out_of_range() {
        let d = matrix(&[&[3.0, 1.0], &[2.0, 5.0]]);
        assert!(top_k(&d, 0).is_err());
        assert!(top_k(&d, 5).is_err());
    }

    #[test]
    fn top_k_ties_break_by_location() {
        let d = matrix(&[&[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(
            top_k(&d, 4).unwrap(),
            locs(&[(0, 0), (0, 1), (1, 0), (1, 1)])
        );
    }

    #[test]
    fn jaccard_edges() {
        let a = locs(&[(0, 0), (0, 1)]);
        let b = locs(&[(1, 0), (1, 1)]);
        assert_eq!(stability_overlap(&a, &a), 1.0);
        assert_eq!(stability_overlap(&a, &b), 0.0);
        assert_eq!(stability_overlap(&a, &locs(&[(0, 1), (1, 1)])), 1.0 / 3.0);
    }

    #[test]
    fn random_subset_null_is_about_a_seventh() {
        // Exact expectation of |A∩B|/|A∪B| for two uniform 8-subsets of 32.
        fn choose(n: u64, k: u64) -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        let exact: f64 = (0..=8u64)
            .map(|i| choose(8, i) * choose(24, 8 - i) / choose(32, 8) * i as f64 / (16 - i) as f64)
            .sum();
        let mut rng = RngState::new(3);
        let all: Vec<HeadLocation> = (0..4)
            .flat_map(|l| (0..8).map(move |h| HeadLocation::new(l, h)))
            .collect();
        let draw = |rng: &mut RngState| {
            LocationSet(rng.distinct(32, 8).into_iter().map(|i| all[i]).collect())
        };
        let n = 20_000;
        let mc: f64 = (0..n)
            .map(|_| {
                let (a, b) = (draw(&mut rng), draw(&mut rng));
                stability_overlap(&a, &b)
            })
            .sum::<f64>()
            / n as f64;
        assert!((mc - exact).abs() < 0.005, "mc {mc} exact {exact}");
        assert!((exact - 0.14).abs() < 0.01);
    }

    #[test]
    fn heatmap_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let d = DeltaMatrix {
            values: Tensor::from_rows(&[vec![0.1, 1.0 / 3.0, 0.0], vec![1e-300, 2.5, 7.0]])
                .unwrap(),
            pairs: 100,
            shots: 4,
        };
        export_heatmap(&d, 17, &path).unwrap();
        let (back, seed) = read_heatmap(&path).unwrap();
        assert_eq!(back, d);
        assert_eq!(seed, 17);
        let text = std::fs::read_to_string(&path).unwrap();
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 3);
        assert!(body[1..].iter().all(|r| r.split(',').count() == 4));
    }

    #[test]
    fn location_set_json_is_pairs() {
        let s = locs(&[(2, 3), (0, 1)]);
        assert_eq!(serde_json::to_string(&s).unwrap(), "[[2,3],[0,1]]");
    }

    proptest! {
        #[test]
        fn top_k_matches_sort_oracle(vals in proptest::collection::vec(0u8..6, 12), k in 1usize..=12) {
            let rows: Vec<Vec<f64>> = vals.chunks(4).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
            let d = DeltaMatrix { values: Tensor::from_rows(&rows).unwrap(), pairs: 1, shots: 1 };
            let got = top_k(&d, k).unwrap();
            // Oracle: repeatedly take the first maximum in row-major order.
            let mut remaining: Vec<(usize, f64)> = vals.iter().map(|&v| v as f64).enumerate().collect();
            let mut want = Vec::new();
            for _ in 0..k {
                let mut best = 0;
                for i in 1..remaining.len() {
                    if remaining[i].1 > remaining[best].1 { best = i; }
                }
                let (idx, _) = remaining.remove(best);
                want.push(HeadLocation::new(idx / 4, idx % 4));
            }
            prop_assert_eq!(got.0, want);
        }

        #[test]
        fn jaccard_is_symmetric_and_bounded(a in proptest::collection::btree_set(0usize..16, 1..8),
                                            b in proptest::collection::btree_set(0usize..16, 1..8)) {
            let to = |s: &std::collections::BTreeSet<usize>| LocationSet(s.iter().map(|&i| HeadLocation::new(i / 4, i % 4)).collect());
            let (sa, sb) = (to(&a), to(&b));
            let j = stability_overlap(&sa, &sb);
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert_eq!(j, stability_overlap(&sb, &sa));
        }
    }
}
