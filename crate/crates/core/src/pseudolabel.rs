//! Pseudo-labels for the unlabeled domain: k-means within every camera, then
//! cross-camera grouping of clusters by nearest centroid.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignednet::AlignedNet;
use crate::error::{ReidError, Result};
use crate::synthgen::{Dataset, Image};

/// Number of clusters per camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "lowercase")]
pub enum KRule {
    Fixed(usize),
    /// `round(samples_in_camera * ratio)`, at least 1.
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub k_per_camera: KRule,
    pub max_kmeans_iters: usize,
    pub seed: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self { k_per_camera: KRule::Ratio(0.25), max_kmeans_iters: 100, seed: 0 }
    }
}

impl KRule {
    pub fn resolve(self, population: usize) -> usize {
        match self {
            KRule::Fixed(k) => k,
            KRule::Ratio(r) => ((population as f64 * r).round() as usize).max(1),
        }
    }
}

/// Global embedding of every image, one row per image.
pub fn extract_features(model: &AlignedNet, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
    Ok(model.embed(images)?.into_iter().map(|e| e.global).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after every assignment pass.
    pub distortion_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn distortion(&self) -> f64 {
        *self.distortion_history.last().expect("at least one pass")
    }
}

/// Distance-weighted seeding over distinct indices: the first centre is
/// uniform, later ones are drawn with probability proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.gen_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = (0..n).filter(|&i| !chosen[i]).map(|i| d2[i]).sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen_range(0.0..total);
            let mut pick = None;
            for i in (0..n).filter(|&i| !chosen[i] && d2[i] > 0.0) {
                pick = Some(i);
                if r < d2[i] {
                    break;
                }
                r -= d2[i];
            }
            pick.expect("positive total has a positive entry")
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.gen_range(0..free.len())]
        };
        chosen[pick] = true;
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &points[pick]));
        }
        centroids.push(points[pick].clone());
    }
    centroids
}

/// Lloyd's algorithm until the assignment stops changing or `max_iters`
/// passes. Empty clusters move to the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iters: usize, rng: &mut ChaCha8Rng) -> Result<KMeansResult> {
    if k == 0 || k > points.len() {
        return Err(ReidError::KExceedsPopulation { k, population: points.len(), camera: 0 });
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(ReidError::InvalidArgument("points have different dimensions".into()));
    }
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let (next, cost): (Vec<usize>, Vec<f64>) = points.iter().map(|p| nearest(p, &centroids)).unzip();
        history.push(cost.iter().sum());
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .map(|i| (i, sq_dist(&points[i], &centroids[assignments[i]])))
                    .fold((0, -1.0), |best, x| if x.1 > best.1 { x } else { best });
                centroids[c] = points[far.0].clone();
                assignments[far.0] = c;
                counts[c] = 1;
            }
        }
    }
    Ok(KMeansResult { centroids, assignments, distortion_history: history, iterations })
}

/// k-means of one camera; `members` are positions in the full feature list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraClusters {
    pub camera: u32,
    pub members: Vec<usize>,
    pub result: KMeansResult,
}

pub fn per_camera_kmeans(features: &[Vec<f64>], camera_ids: &[u32], cfg: &ClusterConfig) -> Result<Vec<CameraClusters>> {
    if features.len() != camera_ids.len() {
        return Err(ReidError::LengthMismatch(features.len(), camera_ids.len()));
    }
    let mut by_cam: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &c) in camera_ids.iter().enumerate() {
        by_cam.entry(c).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_cam.len());
    for (camera, members) in by_cam {
        let k = cfg.k_per_camera.resolve(members.len());
        if k == 0 || k > members.len() {
            return Err(ReidError::KExceedsPopulation { k, population: members.len(), camera });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (u64::from(camera) << 32));
        let points: Vec<Vec<f64>> = members.iter().map(|&i| features[i].clone()).collect();
        let result = kmeans(&points, k, cfg.max_kmeans_iters, &mut rng)?;
        out.push(CameraClusters { camera, members, result });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelMap {
    /// Pseudo identity per feature row.
    pub assignments: Vec<u32>,
    /// Cluster id (within its camera) per feature row.
    pub clusters: Vec<usize>,
    pub cameras: Vec<u32>,
    /// `(camera, centroids)` in camera order.
    pub per_camera_clusters: Vec<(u32, Vec<Vec<f64>>)>,
    /// Pseudo identity -> one cluster id per camera, in camera order.
    pub merge_table: Vec<Vec<usize>>,
}

impl PseudoLabelMap {
    pub fn num_identities(&self) -> usize {
        self.merge_table.len()
    }

    /// Every pseudo identity has members in every camera and no cluster is
    /// used twice.
    pub fn check_invariants(&self) -> Result<()> {
        let ncam = self.per_camera_clusters.len();
        for (ci, (cam, cents)) in self.per_camera_clusters.iter().enumerate() {
            let mut used = vec![false; cents.len()];
            for row in &self.merge_table {
                if row.len() != ncam || row[ci] >= cents.len() || std::mem::replace(&mut used[row[ci]], true) {
                    return Err(ReidError::InvalidArgument(format!("cluster reuse or gap in camera {cam}")));
                }
            }
        }
        for pid in 0..self.merge_table.len() as u32 {
            for (cam, _) in &self.per_camera_clusters {
                let covered = self.assignments.iter().zip(&self.cameras).any(|(&a, c)| a == pid && c == cam);
                if !covered {
                    return Err(ReidError::InvalidArgument(format!("pseudo identity {pid} has no image in camera {cam}")));
                }
            }
        }
        Ok(())
    }
}

/// Groups clusters across cameras. Camera order is ascending; the first camera
/// is the reference. Each reference cluster, in index order, takes the nearest
/// still-unmatched centroid of every other camera (ties to the lowest index).
pub fn cross_view_merge(clusters: &[CameraClusters], num_samples: usize) -> Result<PseudoLabelMap> {
    let ks: Vec<usize> = clusters.iter().map(|c| c.result.k()).collect();
    if ks.is_empty() || ks.iter().any(|&k| k != ks[0]) {
        return Err(ReidError::UnequalK(ks));
    }
    let k = ks[0];
    let reference = &clusters[0].result.centroids;
    let mut merge_table: Vec<Vec<usize>> = (0..k).map(|r| vec![r]).collect();
    for other in &clusters[1..] {
        let cents = &other.result.centroids;
        let mut taken = vec![false; k];
        for (r, row) in merge_table.iter_mut().enumerate() {
            let mut best: Option<(usize, f64)> = None;
            for (j, c) in cents.iter().enumerate().filter(|(j, _)| !taken[*j]) {
                let d = sq_dist(&reference[r], c);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            let (j, _) = best.expect("k unmatched clusters remain");
            taken[j] = true;
            row.push(j);
        }
    }
    let mut pseudo_of: Vec<BTreeMap<usize, u32>> = vec![BTreeMap::new(); clusters.len()];
    for (pid, row) in merge_table.iter().enumerate() {
        for (ci, &cl) in row.iter().enumerate() {
            pseudo_of[ci].insert(cl, pid as u32);
        }
    }
    let mut assignments = vec![u32::MAX; num_samples];
    let mut cluster_ids = vec![usize::MAX; num_samples];
    let mut cameras = vec![u32::MAX; num_samples];
    for (ci, cc) in clusters.iter().enumerate() {
        for (&m, &a) in cc.members.iter().zip(&cc.result.assignments) {
            if m >= num_samples {
                return Err(ReidError::InvalidArgument(format!("member {m} out of range")));
            }
            assignments[m] = pseudo_of[ci][&a];
            cluster_ids[m] = a;
            cameras[m] = cc.camera;
        }
    }
    if let Some(i) = assignments.iter().position(|&a| a == u32::MAX) {
        return Err(ReidError::UncoveredSample(i as u32));
    }
    let per_camera_clusters = clusters.iter().map(|c| (c.camera, c.result.centroids.clone())).collect();
    Ok(PseudoLabelMap { assignments, clusters: cluster_ids, cameras, per_camera_clusters, merge_table })
}

/// Target images paired with pseudo identities, ready for PK sampling.
#[derive(Debug, Clone)]
pub struct PseudoDataset<'a> {
    pub images: Vec<&'a Image>,
    pub labels: Vec<u32>,
}

pub fn build_pseudo_dataset<'a>(ds: &'a Dataset, map: &PseudoLabelMap) -> Result<PseudoDataset<'a>> {
    if map.assignments.len() != ds.len() {
        let missing = ds.samples().get(map.assignments.len()).map_or(0, |s| s.sample_id);
        return Err(ReidError::UncoveredSample(missing));
    }
    Ok(PseudoDataset { images: ds.images(), labels: map.assignments.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub precision: f64,
    pub recall: f64,
}

/// Pair precision/recall of `pseudo` against `truth`.
pub fn pair_metrics(pseudo: &[u32], truth: &[u32]) -> Result<PairMetrics> {
    if pseudo.len() != truth.len() {
        return Err(ReidError::LengthMismatch(pseudo.len(), truth.len()));
    }
    let (mut both, mut same_pseudo, mut same_truth) = (0u64, 0u64, 0u64);
    for i in 0..pseudo.len() {
        for j in i + 1..pseudo.len() {
            let p = pseudo[i] == pseudo[j];
            let t = truth[i] == truth[j];
            both += u64::from(p && t);
            same_pseudo += u64::from(p);
            same_truth += u64::from(t);
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(PairMetrics { precision: ratio(both, same_pseudo), recall: ratio(both, same_truth) })
}

/// Line records `sample_id camera_id cluster_id pseudo_id`.
pub fn format_map(ds: &Dataset, map: &PseudoLabelMap) -> String {
    let mut s = String::from("# sample_id camera_id cluster_id pseudo_id\n");
    for (i, sample) in ds.samples().iter().enumerate() {
        writeln!(s, "{} {} {} {}", sample.sample_id, map.cameras[i], map.clusters[i], map.assignments[i])
            .expect("string write");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_equal_to_distinct_points() {
        let pts: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let r = kmeans(&pts, 3, 100, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.distortion(), 0.0);
        assert_eq!(r.assignments[1], r.assignments[3]);
        let mut distinct = r.assignments.clone();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn k_too_large() {
        let cfg = ClusterConfig { k_per_camera: KRule::Fixed(3), ..Default::default() };
        let feats = vec![vec![0.0]; 4];
        let err = per_camera_kmeans(&feats, &[0, 0, 1, 1], &cfg).unwrap_err();
        assert!(matches!(err, ReidError::KExceedsPopulation { k: 3, population: 2, camera: 0 }));
    }

    #[test]
    fn unambiguous_merge() {
        let feats = vec![vec![0.0, 0.0], vec![10.0, 10.0], vec![10.1, 9.9], vec![0.1, 0.0]];
        let cams = [0, 0, 1, 1];
        let cfg = ClusterConfig { k_per_camera: KRule::Fixed(2), ..Default::default() };
        let cl = per_camera_kmeans(&feats, &cams, &cfg).unwrap();
        let map = cross_view_merge(&cl, 4).unwrap();
        map.check_invariants().unwrap();
        assert_eq!(map.assignments[0], map.assignments[3]);
        assert_eq!(map.assignments[1], map.assignments[2]);
        assert_ne!(map.assignments[0], map.assignments[1]);
    }

    #[test]
    fn unequal_k_is_rejected() {
        let mk = |camera, k: usize| CameraClusters {
            camera,
            members: (0..k).collect(),
            result: KMeansResult {
                centroids: vec![vec![0.0]; k],
                assignments: (0..k).collect(),
                distortion_history: vec![0.0],
                iterations: 1,
            },
        };
        assert!(matches!(cross_view_merge(&[mk(0, 2), mk(1, 3)], 3), Err(ReidError::UnequalK(_))));
    }

    #[test]
    fn pair_metric_limits() {
        let truth = [0, 0, 1, 1, 2, 2];
        assert_eq!(pair_metrics(&truth, &truth).unwrap(), PairMetrics { precision: 1.0, recall: 1.0 });
        let one = [0; 6];
        let m = pair_metrics(&one, &truth).unwrap();
        assert_eq!(m.recall, 1.0);
        assert!((m.precision - 3.0 / 15.0).abs() < 1e-12);
    }
}
