//! Spatial-domain baselines: global and per-voxel random sampling,
//! per-voxel k-means and occupied octree leaves.

use std::collections::{BTreeMap, BTreeSet};

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::metrics::squared_distance;
use crate::model::{encode, EncoderKind, Model, VoxelCode};
use crate::pc_io::{Point, PointCloud};
use crate::voxelize::{voxel_seed, LocalVoxel, VoxelIndex, VoxelizedCloud};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    GRandom,
    VRandom,
    VKmeans,
    Octree,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 4] = [Self::GRandom, Self::VRandom, Self::VKmeans, Self::Octree];

    pub fn name(self) -> &'static str {
        match self {
            Self::GRandom => "g_random",
            Self::VRandom => "v_random",
            Self::VKmeans => "v_kmeans",
            Self::Octree => "octree",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| PctError::Config(format!("unknown baseline method `{s}` (g_random, v_random, v_kmeans, octree)")))
    }
}

/// A target share of the original scalars, `3N`, to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Budget {
    pub target_ratio: f64,
}

impl Budget {
    pub fn new(target_ratio: f64) -> Result<Self> {
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(PctError::Config(format!("ratio must lie in (0, 1], got {target_ratio}")));
        }
        Ok(Budget { target_ratio })
    }

    /// Points a point-sampling method may keep out of `n`.
    pub fn point_count(&self, n: usize) -> usize {
        ((self.target_ratio * n as f64).floor() as usize).min(n)
    }
}

pub fn g_random(cloud: &PointCloud, budget: Budget, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(PctError::Empty("cannot resample an empty cloud".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), budget.point_count(cloud.len())).into_vec();
    idx.sort_unstable();
    Ok(PointCloud::new(idx.into_iter().map(|i| cloud.points[i]).collect()))
}

/// Per-voxel quota `q` whose total `sum_i min(n_i, q)` is closest to the
/// budget. Consecutive quotas differ by at most `M` points, so the realized
/// total is within `M` of the target.
pub fn voxel_quota(populations: &[usize], budget: Budget) -> usize {
    let n: usize = populations.iter().sum();
    let target = budget.point_count(n);
    if target == 0 {
        return 0;
    }
    let total = |q: usize| populations.iter().map(|&p| p.min(q)).sum::<usize>();
    let (mut lo, mut hi) = (1, populations.iter().copied().max().unwrap_or(1));
    while lo < hi {
        let mid = (lo + hi) / 2;
        if total(mid) >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    if lo > 1 && target - total(lo - 1) < total(lo) - target {
        lo - 1
    } else {
        lo
    }
}

fn populations(voxelized: &VoxelizedCloud) -> Vec<usize> {
    voxelized.voxels.values().map(|m| m.points.len()).collect()
}

/// The same number of randomly chosen points from every voxel.
pub fn v_random(voxelized: &VoxelizedCloud, budget: Budget, seed: u64) -> PointCloud {
    let quota = voxel_quota(&populations(voxelized), budget);
    let mut points = Vec::new();
    for (&index, members) in &voxelized.voxels {
        let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(seed, index));
        let k = members.points.len().min(quota);
        let mut idx = sample(&mut rng, members.points.len(), k).into_vec();
        idx.sort_unstable();
        points.extend(idx.into_iter().map(|i| members.points[i]));
    }
    PointCloud::new(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Point>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
}

pub const KMEANS_MAX_ITERATIONS: usize = 50;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

fn nearest_center(p: &Point, centers: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, q) in centers.iter().enumerate() {
        let d = squared_distance(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let mut centers = vec![points[rng.gen_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => rng.gen_range(0..points.len()),
        };
        centers.push(points[next]);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, &points[next]));
        }
    }
    centers
}

/// Lloyd's algorithm from k-means++ seeds. `k` is clamped to the number of
/// points; an emptied cluster keeps its previous center.
pub fn kmeans(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    if points.is_empty() || k == 0 {
        return KMeansResult { centers: Vec::new(), inertia: Vec::new() };
    }
    if k >= points.len() {
        return KMeansResult { centers: points.to_vec(), inertia: vec![0.0] };
    }
    let mut centers = kmeans_pp(points, k, rng);
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        let mut inertia = 0.0;
        for p in points {
            let (c, d) = nearest_center(p, &centers);
            inertia += d;
            counts[c] += 1;
            for a in 0..3 {
                sums[c][a] += p[a];
            }
        }
        let previous = trace.last().copied();
        trace.push(inertia);
        if inertia == 0.0 || previous.is_some_and(|prev| prev - inertia < KMEANS_TOLERANCE * prev) {
            break;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].map(|s| s / counts[c] as f64);
            }
        }
    }
    KMeansResult { centers, inertia: trace }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VKmeansOutput {
    pub cloud: PointCloud,
    pub traces: BTreeMap<VoxelIndex, Vec<f64>>,
}

/// Per-voxel k-means with the voxel quota as `k`; the cluster centers are
/// the reconstruction.
pub fn v_kmeans(voxelized: &VoxelizedCloud, budget: Budget, seed: u64) -> VKmeansOutput {
    let quota = voxel_quota(&populations(voxelized), budget);
    let results: Vec<(VoxelIndex, KMeansResult)> = voxelized
        .voxels
        .par_iter()
        .map(|(&index, members)| {
            let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(seed, index));
            (index, kmeans(&members.points, quota, &mut rng))
        })
        .collect();
    let mut points = Vec::new();
    let mut traces = BTreeMap::new();
    for (index, r) in results {
        points.extend(r.centers);
        traces.insert(index, r.inertia);
    }
    VKmeansOutput { cloud: PointCloud::new(points), traces }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OctreeOutput {
    pub cloud: PointCloud,
    pub depth: u32,
    pub leaves: usize,
    /// `3 leaves / 3N`.
    pub ratio: f64,
}

pub const OCTREE_MAX_DEPTH: u32 = 21;

/// Centers of the occupied leaves after `depth` rounds of 8-way subdivision
/// of the cube spanning the cloud's bounding box. Cells are half-open except
/// that the cube's upper faces belong to the last cell.
pub fn octree_represent(cloud: &PointCloud, depth: u32) -> Result<OctreeOutput> {
    if !(1..=OCTREE_MAX_DEPTH).contains(&depth) {
        return Err(PctError::Config(format!("octree depth must lie in 1..={OCTREE_MAX_DEPTH}, got {depth}")));
    }
    if cloud.is_empty() {
        return Err(PctError::Empty("cannot build an octree over an empty cloud".into()));
    }
    cloud.check_finite()?;
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &cloud.points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let mut side = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if side == 0.0 {
        side = 1.0;
    }
    let cells = 1u64 << depth;
    let cell = side / cells as f64;
    let occupied: BTreeSet<[u64; 3]> = cloud
        .points
        .iter()
        .map(|p| [0, 1, 2].map(|a| (((p[a] - lo[a]) / cell).floor() as u64).min(cells - 1)))
        .collect();
    let points: Vec<Point> = occupied
        .iter()
        .map(|c| [0, 1, 2].map(|a| lo[a] + (c[a] as f64 + 0.5) * cell))
        .collect();
    let leaves = points.len();
    Ok(OctreeOutput {
        cloud: PointCloud::new(points),
        depth,
        leaves,
        ratio: leaves as f64 / cloud.len() as f64,
    })
}

/// Octree whose ratio is closest to `target`, found by bisection over depth
/// (occupied leaves never decrease with depth).
pub fn octree_for_ratio(cloud: &PointCloud, target: f64) -> Result<OctreeOutput> {
    let (mut lo, mut hi) = (1, OCTREE_MAX_DEPTH);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if octree_represent(cloud, mid)?.ratio >= target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let above = octree_represent(cloud, lo)?;
    if lo > 1 {
        let below = octree_represent(cloud, lo - 1)?;
        if (target - below.ratio).abs() < (above.ratio - target).abs() {
            return Ok(below);
        }
    }
    Ok(above)
}

/// Code of one voxel from a PointNet-style encoder (shared per-point MLP
/// followed by max pooling).
pub fn pointnet_encode(model: &Model, voxel: &LocalVoxel) -> Result<VoxelCode> {
    if model.config.encoder != EncoderKind::PointNet {
        return Err(PctError::Config("model does not use the pointnet encoder".into()));
    }
    encode(model, voxel.voxel_index, &voxel.local_points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelize::{partition, VoxelSpec};

    fn random_cloud(seed: u64, n: usize, scale: f64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new((0..n).map(|_| [rng.gen::<f64>() * scale, rng.gen::<f64>() * scale, rng.gen()]).collect())
    }

    #[test]
    fn g_random_counts_and_determinism() {
        let cloud = random_cloud(1, 100_000, 10.0);
        let b = Budget::new(0.0278).unwrap();
        let a = g_random(&cloud, b, 5).unwrap();
        assert_eq!(a.len(), 2780);
        assert_eq!(a, g_random(&cloud, b, 5).unwrap());
        let small = random_cloud(2, 50, 1.0);
        assert_eq!(g_random(&small, Budget::new(1.0).unwrap(), 0).unwrap(), small);
        assert!(g_random(&PointCloud::new(vec![]), b, 0).is_err());
    }

    #[test]
    fn quota_clamps_sparse_voxels() {
        assert_eq!(voxel_quota(&[10, 10, 10], Budget::new(0.4).unwrap()), 4);
        let mut cloud = vec![[0.5, 0.5, 0.5]];
        cloud.extend((0..20).map(|i| [1.5, 0.5, i as f64 / 20.0]));
        let vc = partition(&PointCloud::new(cloud), &VoxelSpec::new([1.0; 3], [0.0; 3]).unwrap()).unwrap();
        let out = v_random(&vc, Budget::new(0.25).unwrap(), 3);
        assert_eq!(out.len(), 5);
        assert!(out.points.contains(&[0.5, 0.5, 0.5]));
    }

    #[test]
    fn v_random_hits_budget_within_voxel_count() {
        let cloud = random_cloud(4, 5000, 6.0);
        let vc = partition(&cloud, &VoxelSpec::new([1.0; 3], [0.0; 3]).unwrap()).unwrap();
        for ratio in [0.01, 0.05, 0.3] {
            let out = v_random(&vc, Budget::new(ratio).unwrap(), 1);
            let realized = out.len() as f64 / 5000.0;
            assert!((realized - ratio).abs() <= vc.voxel_count() as f64 / 5000.0);
        }
    }

    #[test]
    fn kmeans_k_equals_n_returns_points() {
        let pts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]];
        let r = kmeans(&pts, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.centers, pts);
        assert_eq!(r.inertia, vec![0.0]);
    }

    #[test]
    fn kmeans_separated_pairs() {
        let pts = vec![[0.0; 3], [0.0, 0.0, 0.2], [10.0, 0.0, 0.0], [10.0, 0.0, 0.2]];
        for seed in 0..10 {
            let mut c = kmeans(&pts, 2, &mut ChaCha8Rng::seed_from_u64(seed)).centers;
            c.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(c, vec![[0.0, 0.0, 0.1], [10.0, 0.0, 0.1]]);
        }
    }

    #[test]
    fn octree_single_octant() {
        let cloud = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.1, 0.2, 0.3], [4.0, 0.0, 0.0]]);
        let o = octree_represent(&cloud, 1).unwrap();
        assert_eq!(o.leaves, 2);
        assert_eq!(o.cloud.points[0], [1.0, 1.0, 1.0]);
        let one = PointCloud::new(vec![[0.0; 3], [0.25, 0.25, 0.25], [0.3, 0.1, 0.2], [2.0, 2.0, 2.0]]);
        let o = octree_represent(&one, 1).unwrap();
        assert_eq!(o.cloud.points, vec![[0.5, 0.5, 0.5], [1.5, 1.5, 1.5]]);
    }

    #[test]
    fn octree_leaf_bound_and_bisection() {
        let cloud = random_cloud(7, 3000, 20.0);
        for depth in 1..6 {
            let o = octree_represent(&cloud, depth).unwrap();
            assert!(o.leaves <= cloud.len().min(8usize.pow(depth)));
        }
        let o = octree_for_ratio(&cloud, 0.0278).unwrap();
        let coarser = octree_represent(&cloud, o.depth - 1).unwrap();
        assert!(coarser.ratio <= 0.0278 || o.ratio >= 0.0278);
    }

    #[test]
    fn method_names_round_trip() {
        for m in BaselineMethod::ALL {
            assert_eq!(BaselineMethod::parse(m.name()).unwrap(), m);
        }
        assert!(BaselineMethod::parse("dgcnn").is_err());
    }
}
