//! Clustered activation banks.
//!
//! Context-enhanced activations are collected at each sensitive head and
//! compressed to `M` k-means centers. The centers are the discrete candidate
//! vectors the selection policy chooses among.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{squared_distance, RngState, Tensor};
use crate::model::{HeadLocation, Model, TapSet};
use crate::sensitivity::LocationSet;
use crate::store::{read_container, write_container};
use crate::tasks::Task;

pub const BANK_FORMAT: &str = "stv-bank";
pub const BANK_VERSION: u32 = 1;

/// Captured activations, one `[n_samples, d_head]` matrix per location.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSamples {
    pub locations: LocationSet,
    pub rows: Vec<Tensor>,
}

impl ActivationSamples {
    pub fn n_samples(&self) -> usize {
        self.rows.first().map_or(0, |t| t.rows())
    }

    pub fn at(&self, loc: HeadLocation) -> Option<&Tensor> {
        self.locations
            .iter()
            .position(|l| *l == loc)
            .map(|i| &self.rows[i])
    }
}

/// Runs `n_samples` few-shot prompts and captures every location of `locations`
/// at the final position. One forward pass per prompt; prompt `i` is drawn
/// from substream `i` of `rng`.
pub fn collect(
    model: &Model,
    task: &Task,
    locations: &LocationSet,
    pool: &[usize],
    n_samples: usize,
    shots: usize,
    rng: &RngState,
) -> Result<ActivationSamples> {
    if n_samples == 0 {
        return Err(Error::Invalid("n_samples must be positive".into()));
    }
    locations.validate(model.config())?;
    let prompts: Vec<Vec<u32>> = (0..n_samples)
        .map(|i| {
            Ok(task
                .prompt_from_pool(pool, shots, &mut rng.substream(i as u64))?
                .tokens())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&[u32]> = prompts.iter().map(|p| p.as_slice()).collect();
    let taps = TapSet::new().capture_many(locations.iter().copied());
    let traces = model.forward_batch(&refs, &taps)?;
    let d = model.config().d_head();
    let rows = locations
        .iter()
        .map(|&loc| {
            let mut data = Vec::with_capacity(n_samples * d);
            for tr in &traces {
                data.extend_from_slice(tr.activation(loc).expect("location captured"));
            }
            Tensor::from_vec(&[n_samples, d], data)
        })
        .collect::<Result<_>>()?;
    Ok(ActivationSamples {
        locations: locations.clone(),
        rows,
    })
}

// ---------------------------------------------------------------------------
// k-means
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    /// `[M, d]`
    pub centers: Tensor,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each assignment step, starting with the seeding.
    pub history: Vec<f64>,
}

fn nearest(points: &Tensor, centers: &Tensor) -> (Vec<usize>, f64) {
    let mut inertia = 0.0;
    let assign = (0..points.rows())
        .map(|i| {
            let p = points.row(i);
            let mut best = (0, f64::INFINITY);
            for j in 0..centers.rows() {
                let d = squared_distance(p, centers.row(j));
                if d < best.1 {
                    best = (j, d);
                }
            }
            inertia += best.1;
            best.0
        })
        .collect();
    (assign, inertia)
}

fn means(points: &Tensor, assign: &[usize], m: usize) -> (Tensor, Vec<usize>) {
    let d = points.cols();
    let mut centers = Tensor::zeros(&[m, d]);
    let mut counts = vec![0usize; m];
    for (i, &a) in assign.iter().enumerate() {
        counts[a] += 1;
        for (c, p) in centers.row_mut(a).iter_mut().zip(points.row(i)) {
            *c += p;
        }
    }
    for (j, &n) in counts.iter().enumerate() {
        if n > 0 {
            for c in centers.row_mut(j) {
                *c /= n as f64;
            }
        }
    }
    (centers, counts)
}

/// Cluster means; an empty cluster takes over the point farthest from its
/// own center (lowest index on ties) and means are recomputed.
fn update(points: &Tensor, assign: &mut [usize], m: usize) -> Tensor {
    loop {
        let (centers, counts) = means(points, assign, m);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return centers;
        };
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &a) in assign.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = squared_distance(points.row(i), centers.row(a));
            if d > far_d {
                far = Some(i);
                far_d = d;
            }
        }
        let i = far.expect("n >= M leaves a cluster with two points");
        assign[i] = empty;
    }
}

fn plus_plus_seeds(points: &Tensor, m: usize, rng: &mut RngState) -> Vec<usize> {
    let n = points.rows();
    let mut seeds = vec![rng.below(n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(seeds[0])))
        .collect();
    while seeds.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            rng.below(n)
        };
        seeds.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(squared_distance(points.row(i), points.row(next)));
        }
    }
    seeds
}

fn check_points(points: &Tensor, m: usize) -> Result<()> {
    if points.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "points must be a matrix, got {:?}",
            points.shape()
        )));
    }
    if m == 0 {
        return Err(Error::Invalid("k-means needs M >= 1".into()));
    }
    if points.rows() < m {
        return Err(Error::Invalid(format!(
            "{} points cannot form {m} clusters",
            points.rows()
        )));
    }
    if !points.all_finite() {
        return Err(Error::Numeric("non-finite point".into()));
    }
    Ok(())
}

/// Lloyd iterations from the given initial centers. Stops when assignments
/// are stable or after `max_iters` updates. Errors if the inertia ever rises.
pub fn lloyd(points: &Tensor, init: Tensor, max_iters: usize) -> Result<KMeans> {
    let m = init.rows();
    check_points(points, m)?;
    if init.cols() != points.cols() {
        return Err(Error::Dimension(format!(
            "centers have {} columns, points {}",
            init.cols(),
            points.cols()
        )));
    }
    let mut centers = init;
    let (mut assign, mut inertia) = nearest(points, &centers);
    let mut history = vec![inertia];
    for _ in 0..max_iters {
        let mut next = assign.clone();
        centers = update(points, &mut next, m);
        let (reassigned, new_inertia) = nearest(points, &centers);
        if new_inertia > inertia * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Numeric(format!(
                "k-means inertia rose from {inertia} to {new_inertia}"
            )));
        }
        history.push(new_inertia);
        inertia = new_inertia;
        let stable = reassigned == assign;
        assign = reassigned;
        if stable {
            break;
        }
    }
    Ok(KMeans {
        centers,
        assignments: assign,
        inertia,
        history,
    })
}

/// One k-means++ seeded run.
pub fn kmeans(points: &Tensor, m: usize, max_iters: usize, rng: &mut RngState) -> Result<KMeans> {
    check_points(points, m)?;
    let seeds = plus_plus_seeds(points, m, rng);
    let rows: Vec<Vec<f64>> = seeds.iter().map(|&i| points.row(i).to_vec()).collect();
    lloyd(points, Tensor::from_rows(&rows)?, max_iters)
}

/// Best of `restarts` runs; restart `r` uses substream `r`. Earlier runs win ties.
pub fn kmeans_restarts(
    points: &Tensor,
    m: usize,
    max_iters: usize,
    restarts: usize,
    rng: &RngState,
) -> Result<KMeans> {
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let run = kmeans(points, m, max_iters, &mut rng.substream(r as u64))?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Lloyd from every `M`-subset of the points as seeds; for tiny inputs only.
pub fn kmeans_exhaustive_seeding(points: &Tensor, m: usize, max_iters: usize) -> Result<KMeans> {
    check_points(points, m)?;
    let n = points.rows();
    let mut best: Option<KMeans> = None;
    let mut idx: Vec<usize> = (0..m).collect();
    loop {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| points.row(i).to_vec()).collect();
        let run = lloyd(points, Tensor::from_rows(&rows)?, max_iters)?;
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
        // Next combination in lexicographic order.
        let Some(pos) = (0..m).rev().find(|&i| idx[i] < n - m + i) else {
            break;
        };
        idx[pos] += 1;
        for j in pos + 1..m {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(best.expect("at least one subset"))
}

// ---------------------------------------------------------------------------
// Bank
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: String,
    pub shots: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// `M` candidate vectors for every location.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationBank {
    pub locations: LocationSet,
    /// `[M, d_head]` per location, aligned with `locations`.
    pub centers: Vec<Tensor>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            clusters: 16,
            max_iters: 100,
            restarts: 5,
        }
    }
}

impl ActivationBank {
    pub fn clusters(&self) -> usize {
        self.centers.first().map_or(0, |t| t.rows())
    }

    pub fn candidate(&self, k: usize, index: usize) -> &[f64] {
        self.centers[k].row(index)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = BankHeader {
            locations: self.locations.clone(),
            clusters: self.clusters(),
            d_head: self.centers.first().map_or(0, |t| t.cols()),
            provenance: self.provenance.clone(),
        };
        let payload: Vec<f64> = self
            .centers
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect();
        write_container(path, BANK_FORMAT, BANK_VERSION, &header, &payload)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, payload): (BankHeader, _) = read_container(path, BANK_FORMAT, BANK_VERSION)?;
        let per = h.clusters * h.d_head;
        if payload.len() != per * h.locations.len() {
            return Err(Error::Format(format!(
                "{}: payload holds {} values, header implies {}",
                path.display(),
                payload.len(),
                per * h.locations.len()
            )));
        }
        let centers = payload
            .chunks(per.max(1))
            .take(h.locations.len())
            .map(|c| Tensor::from_vec(&[h.clusters, h.d_head], c.to_vec()))
            .collect::<Result<_>>()?;
        Ok(Self {
            locations: h.locations,
            centers,
            provenance: h.provenance,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    locations: LocationSet,
    clusters: usize,
    d_head: usize,
    provenance: Provenance,
}

/// Independent k-means per location; location `k` uses substream `k` of `rng`.
pub fn build_bank(
    samples: &ActivationSamples,
    cfg: &KMeansConfig,
    provenance: Provenance,
    rng: &RngState,
) -> Result<ActivationBank> {
    let centers = samples
        .rows
        .par_iter()
        .enumerate()
        .map(|(k, pts)| {
            kmeans_restarts(
                pts,
                cfg.clusters,
                cfg.max_iters,
                cfg.restarts,
                &rng.substream(k as u64),
            )
            .map(|r| r.centers)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ActivationBank {
        locations: samples.locations.clone(),
        centers,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_points(n: usize, d: usize, rng: &mut RngState) -> Tensor {
        let data = (0..n * d).map(|_| rng.normal()).collect();
        Tensor::from_vec(&[n, d], data).unwrap()
    }

    fn brute_force_2means(points: &Tensor) -> f64 {
        let n = points.rows();
        let mut best = f64::INFINITY;
        for mask in 1..(1u32 << n) - 1 {
            let assign: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let (c, _) = means(points, &assign, 2);
            let cost: f64 = (0..n)
                .map(|i| squared_distance(points.row(i), c.row(assign[i])))
                .sum();
            best = best.min(cost);
        }
        best
    }

    #[test]
    fn exact_fit_when_n_equals_m() {
        let mut rng = RngState::new(1);
        let pts = random_points(5, 3, &mut rng);
        let r = kmeans(&pts, 5, 100, &mut rng).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut centers: Vec<Vec<f64>> = (0..5).map(|i| r.centers.row(i).to_vec()).collect();
        let mut want: Vec<Vec<f64>> = (0..5).map(|i| pts.row(i).to_vec()).collect();
        centers.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(centers, want);
    }

    #[test]
    fn separated_blobs_recover_means() {
        let mut rng = RngState::new(2);
        let mut rows = Vec::new();
        for c in [-50.0, 50.0] {
            for _ in 0..20 {
                rows.push(vec![c + rng.normal(), c + rng.normal()]);
            }
        }
        let pts = Tensor::from_rows(&rows).unwrap();
        let r = kmeans_restarts(&pts, 2, 100, 5, &rng).unwrap();
        for blob in [&rows[..20], &rows[20..]] {
            let mean: Vec<f64> = (0..2)
                .map(|j| blob.iter().map(|r| r[j]).sum::<f64>() / 20.0)
                .collect();
            let hit = (0..2).any(|k| squared_distance(r.centers.row(k), &mean).sqrt() < 1e-9);
            assert!(hit, "no center near {mean:?}");
        }
    }

    #[test]
    fn tiny_instance_reaches_brute_force_optimum() {
        let mut rng = RngState::new(3);
        let pts = random_points(6, 2, &mut rng);
        let opt = brute_force_2means(&pts);
        let r = kmeans_restarts(&pts, 2, 100, 5, &rng).unwrap();
        assert!(r.inertia >= opt - 1e-9);
        let ex = kmeans_exhaustive_seeding(&pts, 2, 100).unwrap();
        assert!((ex.inertia - opt).abs() < 1e-9);
    }

    #[test]
    fn one_cluster_is_the_mean() {
        let mut rng = RngState::new(4);
        let pts = random_points(30, 4, &mut rng);
        let r = kmeans(&pts, 1, 100, &mut rng).unwrap();
        for j in 0..4 {
            let mean = (0..30).map(|i| pts.get(i, j)).sum::<f64>() / 30.0;
            assert!((r.centers.get(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_too_few_points() {
        let pts = Tensor::zeros(&[2, 3]);
        assert!(kmeans(&pts, 3, 10, &mut RngState::new(0)).is_err());
        assert!(kmeans(&pts, 0, 10, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn empty_cluster_is_refilled() {
        // Seeds on duplicate points leave one cluster empty after assignment.
        let pts = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![10.0], vec![11.0]]).unwrap();
        let init = Tensor::from_rows(&[vec![0.0], vec![0.0], vec![10.5]]).unwrap();
        let r = lloyd(&pts, init, 100).unwrap();
        let mut counts = [0; 3];
        for &a in &r.assignments {
            counts[a] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn bank_round_trip_and_keys() {
        let mut rng = RngState::new(5);
        let locs = LocationSet(vec![HeadLocation::new(1, 2), HeadLocation::new(0, 0)]);
        let samples = ActivationSamples {
            locations: locs.clone(),
            rows: vec![
                random_points(20, 4, &mut rng),
                random_points(20, 4, &mut rng),
            ],
        };
        let cfg = KMeansConfig {
            clusters: 3,
            max_iters: 100,
            restarts: 5,
        };
        let prov = Provenance {
            task: "t".into(),
            shots: 4,
            n_samples: 20,
            seed: 9,
        };
        let bank = build_bank(&samples, &cfg, prov, &rng).unwrap();
        assert_eq!(bank.locations, locs);
        assert_eq!(bank.clusters(), 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bank.bin");
        bank.save(&path).unwrap();
        assert_eq!(ActivationBank::load(&path).unwrap(), bank);
    }

    #[test]
    fn more_clusters_never_cost_more() {
        let rng = RngState::new(6);
        let pts = random_points(40, 3, &mut rng.derive("pts"));
        let mut last = f64::INFINITY;
        for m in 1..=6 {
            let r = kmeans_restarts(&pts, m, 100, 5, &rng).unwrap();
            assert!(r.inertia <= last + 1e-9, "M={m}: {} > {last}", r.inertia);
            last = r.inertia;
        }
    }

    proptest! {
        #[test]
        fn inertia_history_is_monotone(seed in 0u64..1000, n in 3usize..30, m in 1usize..4) {
            let mut rng = RngState::new(seed);
            let pts = random_points(n, 2, &mut rng);
            let r = kmeans(&pts, m.min(n), 100, &mut rng).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12);
            }
            let recomputed: f64 = (0..n).map(|i| squared_distance(pts.row(i), r.centers.row(r.assignments[i]))).sum();
            prop_assert!((recomputed - r.inertia).abs() < 1e-9);
        }
    }
}
