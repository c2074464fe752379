//! Evaluation metrics.
//!
//! Undefined results (empty clouds, single-class AUC, zero-sum SIM) are
//! reported as [`MetricError::Undefined`] or `None`, never as zero.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    hammersley_directions, look_at_world_up, unproject_pixel, CameraIntrinsics, GeometryError,
    Vec3, Viewpoint, EVAL_RADIUS,
};
use crate::heatmap::{AffordanceHeatmap, HeatKind};
use crate::render::{raycast_depth, RenderError};
use crate::voxel::{voxel_center, Occupancy, VoxelIndex};

/// F-score distance threshold.
pub const FSCORE_TAU: f64 = 0.05;
/// Probability levels averaged by aIoU / aCD.
pub const AFFORDANCE_THRESHOLDS: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("resolution mismatch: {0} vs {1}")]
    Resolution(usize, usize),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
    #[error("heatmap is not a probability map")]
    NotProbability,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Self {
        Self {
            points: points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    /// Voxel centres of a set of indices.
    pub fn from_voxels(indices: &[VoxelIndex], r: usize) -> Self {
        Self::new(indices.iter().map(|i| voxel_center(i, r)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets score 1.
pub fn volumetric_iou(a: &Occupancy, b: &Occupancy) -> Result<f64, MetricError> {
    if a.resolution() != b.resolution() {
        return Err(MetricError::Resolution(a.resolution(), b.resolution()));
    }
    Ok(index_iou(a.indices(), b.indices()))
}

/// IoU of two sorted index lists.
fn index_iou(a: &[VoxelIndex], b: &[VoxelIndex]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

/// Distance from every point of `a` to its nearest neighbour in `b`.
fn nearest_distances(a: &PointCloud, b: &PointCloud) -> Vec<f64> {
    a.points
        .par_iter()
        .map(|p| {
            b.points
                .iter()
                .map(|q| dist(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Half the mean nearest distance from `a` to `b` plus half the reverse.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Undefined("chamfer of an empty cloud"));
    }
    let ab = nearest_distances(a, b);
    let ba = nearest_distances(b, a);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * mean(&ab) + 0.5 * mean(&ba))
}

/// Harmonic mean of the fraction of `a` within `tau` of `b` and vice versa.
pub fn fscore(a: &PointCloud, b: &PointCloud, tau: f64) -> Result<f64, MetricError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Undefined("f-score of an empty cloud"));
    }
    let frac = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let p = frac(nearest_distances(a, b));
    let r = frac(nearest_distances(b, a));
    Ok(if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    })
}

/// Surface points seen from `n_views` Hammersley directions at the
/// evaluation radius, uniformly subsampled to at most `n_points`.
pub fn extract_pointcloud(
    occupied: &Occupancy,
    n_views: usize,
    n_points: usize,
    image_size: u32,
    seed: u64,
) -> Result<PointCloud, MetricError> {
    if occupied.is_empty() {
        return Err(MetricError::Undefined("empty occupancy"));
    }
    let k = CameraIntrinsics::evaluation(image_size)?;
    let views = hammersley_directions(n_views)?
        .iter()
        .map(|d| {
            Ok(Viewpoint::new(
                k,
                look_at_world_up(&(d * EVAL_RADIUS), &Vec3::zeros())?,
            ))
        })
        .collect::<Result<Vec<_>, MetricError>>()?;
    let per_view = views
        .par_iter()
        .map(|view| {
            let depth = raycast_depth(occupied, view)?;
            let mut pts = Vec::new();
            for j in 0..image_size {
                for i in 0..image_size {
                    let d = depth.get(i, j);
                    if d > 0.0 {
                        pts.push(unproject_pixel(i as f64 + 0.5, j as f64 + 0.5, d, view)?);
                    }
                }
            }
            Ok(pts)
        })
        .collect::<Result<Vec<Vec<Vec3>>, MetricError>>()?;
    let all: Vec<Vec3> = per_view.into_iter().flatten().collect();
    if all.is_empty() {
        return Err(MetricError::Undefined("no surface hits"));
    }
    if all.len() <= n_points {
        return Ok(PointCloud::new(all));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, all.len(), n_points).into_vec();
    picked.sort_unstable();
    Ok(PointCloud::new(picked.iter().map(|&i| all[i]).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub tau: f64,
    pub iou: f64,
    /// `None` when exactly one thresholded set is empty.
    pub cd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffordanceScores {
    pub aiou: f64,
    /// Mean over thresholds with a defined CD; `None` if none is defined.
    pub acd: Option<f64>,
    /// Thresholds whose CD was undefined and left out of `acd`.
    pub acd_excluded: usize,
    pub per_threshold: Vec<ThresholdScore>,
}

/// IoU and Chamfer distance of the sets `{p | a_p >= τ}` for each τ in
/// [`AFFORDANCE_THRESHOLDS`], averaged.
pub fn aiou_acd(
    pred: &AffordanceHeatmap,
    gt: &AffordanceHeatmap,
) -> Result<AffordanceScores, MetricError> {
    if pred.resolution != gt.resolution {
        return Err(MetricError::Resolution(pred.resolution, gt.resolution));
    }
    if pred.kind != HeatKind::Probability || gt.kind != HeatKind::Probability {
        return Err(MetricError::NotProbability);
    }
    let r = pred.resolution;
    let mut per_threshold = Vec::with_capacity(AFFORDANCE_THRESHOLDS.len());
    for &tau in &AFFORDANCE_THRESHOLDS {
        let a = pred.threshold(tau);
        let b = gt.threshold(tau);
        let iou = index_iou(a.indices(), b.indices());
        let cd = match (a.is_empty(), b.is_empty()) {
            (true, true) => Some(0.0),
            (false, false) => Some(chamfer(
                &PointCloud::from_voxels(a.indices(), r),
                &PointCloud::from_voxels(b.indices(), r),
            )?),
            _ => None,
        };
        per_threshold.push(ThresholdScore { tau, iou, cd });
    }
    let n = per_threshold.len() as f64;
    let aiou = per_threshold.iter().map(|s| s.iou).sum::<f64>() / n;
    let defined: Vec<f64> = per_threshold.iter().filter_map(|s| s.cd).collect();
    let acd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AffordanceScores {
        aiou,
        acd,
        acd_excluded: per_threshold.len() - defined.len(),
        per_threshold,
    })
}

/// Values of two heatmaps over the union of their supports; absent voxels
/// read 0.
pub fn align_heatmaps(
    pred: &AffordanceHeatmap,
    gt: &AffordanceHeatmap,
) -> Result<(Vec<f64>, Vec<f64>), MetricError> {
    if pred.resolution != gt.resolution {
        return Err(MetricError::Resolution(pred.resolution, gt.resolution));
    }
    let mut merged: BTreeMap<VoxelIndex, (f64, f64)> = BTreeMap::new();
    for (p, v) in pred.positions.iter().zip(&pred.values) {
        merged.entry(*p).or_default().0 = *v;
    }
    for (p, v) in gt.positions.iter().zip(&gt.values) {
        merged.entry(*p).or_default().1 = *v;
    }
    Ok(merged.values().copied().unzip())
}

/// ROC-AUC with `gt` binarized at 0.5 and midrank ties.
pub fn auc(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    let labels: Vec<bool> = gt.iter().map(|&g| g >= 0.5).collect();
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Undefined("auc needs both classes"));
    }
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]));
    let mut ranks = vec![0.0; pred.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pred[order[j + 1]] == pred[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(&labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let np = n_pos as f64;
    Ok((pos_rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Histogram intersection of the two maps after normalizing each to sum 1.
pub fn sim(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    let sp: f64 = pred.iter().sum();
    let sg: f64 = gt.iter().sum();
    if !(sp > 0.0 && sg > 0.0) {
        return Err(MetricError::Undefined("sim needs positive sums"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p / sp).min(g / sg)).sum())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::Length(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Undefined("mae of empty input"));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| (p - g).abs()).sum::<f64>() / pred.len() as f64)
}

/// Named metric values; `None` marks an undefined metric.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub values: BTreeMap<String, Option<f64>>,
}

impl MetricsReport {
    pub fn set(&mut self, name: &str, value: Option<f64>) {
        self.values.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied().flatten()
    }

    fn set_result(
        &mut self,
        name: &str,
        value: Result<f64, MetricError>,
    ) -> Result<(), MetricError> {
        match value {
            Ok(v) => self.set(name, Some(v)),
            Err(MetricError::Undefined(_)) => self.set(name, None),
            Err(e) => return Err(e),
        }
        Ok(())
    }

    /// Geometry metrics between two occupancies (IoU, Chamfer, F-score on
    /// extracted surface clouds).
    pub fn geometry(
        pred: &Occupancy,
        gt: &Occupancy,
        n_views: usize,
        n_points: usize,
        image_size: u32,
        seed: u64,
    ) -> Result<Self, MetricError> {
        let mut report = Self::default();
        report.set("iou", Some(volumetric_iou(pred, gt)?));
        let clouds = (
            extract_pointcloud(pred, n_views, n_points, image_size, seed),
            extract_pointcloud(gt, n_views, n_points, image_size, seed),
        );
        match clouds {
            (Ok(a), Ok(b)) => {
                report.set_result("chamfer", chamfer(&a, &b))?;
                report.set_result("fscore", fscore(&a, &b, FSCORE_TAU))?;
            }
            (Err(MetricError::Undefined(_)), _) | (_, Err(MetricError::Undefined(_))) => {
                report.set("chamfer", None);
                report.set("fscore", None);
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
        Ok(report)
    }

    /// Affordance metrics between two probability heatmaps.
    pub fn affordance(
        pred: &AffordanceHeatmap,
        gt: &AffordanceHeatmap,
    ) -> Result<Self, MetricError> {
        let mut report = Self::default();
        let scores = aiou_acd(pred, gt)?;
        report.set("aiou", Some(scores.aiou));
        report.set("acd", scores.acd);
        report.set("acd_excluded", Some(scores.acd_excluded as f64));
        for s in &scores.per_threshold {
            report.set(&format!("iou@{:.1}", s.tau), Some(s.iou));
            report.set(&format!("cd@{:.1}", s.tau), s.cd);
        }
        let (p, g) = align_heatmaps(pred, gt)?;
        report.set_result("auc", auc(&p, &g))?;
        report.set_result("sim", sim(&p, &g))?;
        report.set_result("mae", mae(&p, &g))?;
        Ok(report)
    }

    pub fn merge(&mut self, other: &MetricsReport) {
        self.values
            .extend(other.values.iter().map(|(k, v)| (k.clone(), *v)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn occ(r: usize, idx: &[VoxelIndex]) -> Occupancy {
        Occupancy::new(r, idx.to_vec()).unwrap()
    }

    fn brute_chamfer(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        let mut s1 = 0.0;
        for p in a {
            let mut m = f64::INFINITY;
            for q in b {
                m = m.min(dist(p, q));
            }
            s1 += m;
        }
        let mut s2 = 0.0;
        for q in b {
            let mut m = f64::INFINITY;
            for p in a {
                m = m.min(dist(p, q));
            }
            s2 += m;
        }
        0.5 * s1 / a.len() as f64 + 0.5 * s2 / b.len() as f64
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud {
            points: (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        }
    }

    #[test]
    fn iou_cases() {
        let a = occ(4, &[[0, 0, 0], [1, 1, 1]]);
        assert_eq!(volumetric_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(volumetric_iou(&a, &occ(4, &[[2, 2, 2]])).unwrap(), 0.0);
        assert_eq!(volumetric_iou(&occ(4, &[]), &occ(4, &[])).unwrap(), 1.0);
        let x: Vec<VoxelIndex> = (0..8).map(|i| [i % 4, i / 4, 0]).collect();
        let y: Vec<VoxelIndex> = (4..12).map(|i| [i % 4, i / 4, 0]).collect();
        assert!((volumetric_iou(&occ(4, &x), &occ(4, &y)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(volumetric_iou(&a, &occ(5, &[])).is_err());
    }

    #[test]
    fn chamfer_and_fscore_cases() {
        let a = PointCloud {
            points: vec![[0.0, 0.0, 0.0]],
        };
        let b = PointCloud {
            points: vec![[1.0, 0.0, 0.0]],
        };
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(chamfer(&a, &PointCloud::default()).is_err());
        assert_eq!(fscore(&a, &a, FSCORE_TAU).unwrap(), 1.0);
        assert_eq!(fscore(&a, &b, FSCORE_TAU).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_cloud(&mut rng, 5);
        let q = random_cloud(&mut rng, 7);
        assert_eq!(
            chamfer(&p, &q).unwrap(),
            brute_chamfer(&p.points, &q.points)
        );
    }

    #[test]
    fn aiou_hand_enumeration() {
        let r = 4;
        let pred = AffordanceHeatmap::new(
            r,
            HeatKind::Probability,
            vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]],
            vec![0.15, 0.35, 0.55],
        )
        .unwrap();
        let gt =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[2, 0, 0]], vec![0.55]).unwrap();
        // τ=0.1: pred {0,1,2} vs {2} → 1/3; τ=0.2, 0.3: {1,2} → 1/2; τ=0.4, 0.5: {2} → 1
        let s = aiou_acd(&pred, &gt).unwrap();
        let expected = (1.0 / 3.0 + 0.5 + 0.5 + 1.0 + 1.0) / 5.0;
        assert!((s.aiou - expected).abs() < 1e-15);
        let h = 0.25;
        // CD at τ=0.1: pred→gt distances {2h, h, 0}, gt→pred 0
        let cd01 = 0.5 * (3.0 * h / 3.0);
        let cd02 = 0.5 * (h / 2.0);
        assert!((s.per_threshold[0].cd.unwrap() - cd01).abs() < 1e-15);
        assert!((s.per_threshold[1].cd.unwrap() - cd02).abs() < 1e-15);
        assert_eq!(s.acd_excluded, 0);
        let same = aiou_acd(&gt, &gt).unwrap();
        assert_eq!((same.aiou, same.acd), (1.0, Some(0.0)));
        let zero =
            AffordanceHeatmap::new(r, HeatKind::Probability, vec![[2, 0, 0]], vec![0.0]).unwrap();
        let z = aiou_acd(&zero, &gt).unwrap();
        assert_eq!(z.aiou, 0.0);
        assert_eq!(z.acd, None);
        assert_eq!(z.acd_excluded, 5);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(
            auc(&[0.1, 0.2, 0.8, 0.9], &[0.0, 0.0, 1.0, 1.0]).unwrap(),
            1.0
        );
        assert_eq!(auc(&[0.5; 4], &[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1.0, 1.0]).is_err());
        let pred = [0.3, 0.7, 0.7, 0.1, 0.9, 0.3];
        let gt = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                if gt[i] == 1.0 && gt[j] == 0.0 {
                    pairs += 1.0;
                    wins += if pred[i] > pred[j] {
                        1.0
                    } else if pred[i] == pred[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        assert_eq!(auc(&pred, &gt).unwrap(), wins / pairs);
    }

    #[test]
    fn sim_and_mae_cases() {
        assert_eq!(sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // normalized (0.1,0.2,0.3,0.4) vs (0.4,0.3,0.2,0.1): mins 0.1+0.2+0.2+0.1
        assert!((sim(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap() - 0.6).abs() < 1e-15);
        assert!(sim(&[0.0, 0.0], &[1.0, 0.0]).is_err());
        assert_eq!(mae(&[0.5, 0.25], &[0.5, 0.25]).unwrap(), 0.0);
        let gt = [0.1, 0.4, 0.6];
        let pred: Vec<f64> = gt.iter().map(|g| (g + 0.2f64).min(1.0)).collect();
        assert!((mae(&pred, &gt).unwrap() - 0.2).abs() < 1e-15);
        assert!(mae(&[1.0], &[]).is_err());
    }

    #[test]
    fn pointcloud_of_single_voxel_stays_inside() {
        let r = 8;
        let o = occ(r, &[[3, 4, 5]]);
        let c = voxel_center(&[3, 4, 5], r);
        let cloud = extract_pointcloud(&o, 20, 500, 64, 1).unwrap();
        assert!(!cloud.is_empty() && cloud.len() <= 500);
        let h = 0.5 / r as f64 + 1e-9;
        for p in &cloud.points {
            for a in 0..3 {
                assert!((p[a] - c[a]).abs() <= h);
            }
        }
        assert_eq!(cloud, extract_pointcloud(&o, 20, 500, 64, 1).unwrap());
        assert!(extract_pointcloud(&occ(r, &[]), 20, 500, 64, 1).is_err());
    }

    #[test]
    fn reports_mark_undefined() {
        let gt = AffordanceHeatmap::new(
            4,
            HeatKind::Probability,
            vec![[0, 0, 0], [1, 0, 0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        let rep = MetricsReport::affordance(&gt, &gt).unwrap();
        assert_eq!(rep.get("aiou"), Some(1.0));
        assert_eq!(rep.values["auc"], None);
        assert_eq!(rep.get("sim"), Some(1.0));
    }
}
