//! Distortion metrics and compression-ratio accounting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::model::CodeStream;
use crate::pc_io::{Point, PointCloud};
use crate::voxelize::{partition, voxel_seed, VoxelIndex, VoxelSpec};

/// Largest set the exact matching accepts.
pub const EMD_MAX_POINTS: usize = 512;

/// Below this many pairs a double loop beats building an R-tree.
const BRUTE_FORCE_PAIRS: usize = 1 << 16;

pub fn squared_distance(a: &Point, b: &Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// For every point of `from`, the squared distance to its nearest point in `to`.
pub fn nearest_squared(from: &[Point], to: &[Point]) -> Vec<f64> {
    if from.len().saturating_mul(to.len()) <= BRUTE_FORCE_PAIRS {
        return from
            .iter()
            .map(|p| to.iter().map(|q| squared_distance(p, q)).fold(f64::INFINITY, f64::min))
            .collect();
    }
    let tree = RTree::bulk_load(to.to_vec());
    from.iter()
        .map(|p| squared_distance(p, tree.nearest_neighbor(*p).expect("non-empty tree")))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn non_empty(name: &str, pts: &[Point]) -> Result<()> {
    if pts.is_empty() {
        return Err(PctError::Empty(format!("{name} point set is empty")));
    }
    Ok(())
}

/// `(1/m) sum_j min_i |q_j - p_i|^2 + (1/n) sum_i min_j |p_i - q_j|^2`.
pub fn chamfer(p: &[Point], q: &[Point]) -> Result<f64> {
    non_empty("first", p)?;
    non_empty("second", q)?;
    Ok(mean(&nearest_squared(q, p)) + mean(&nearest_squared(p, q)))
}

/// Minimum-cost perfect matching for a square cost matrix (row-major).
/// Returns `assignment[row] = column`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // Potentials-based shortest augmenting path; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

fn subsample(points: &[Point], k: usize, rng: &mut ChaCha8Rng) -> Vec<Point> {
    if k >= points.len() {
        return points.to_vec();
    }
    let mut idx = sample(rng, points.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| points[i]).collect()
}

/// Exact earth-mover distance under squared Euclidean cost, divided by the
/// matched cardinality. The larger set is first subsampled (seeded) to the
/// size of the smaller one.
pub fn emd(p: &[Point], q: &[Point], seed: u64) -> Result<f64> {
    non_empty("first", p)?;
    non_empty("second", q)?;
    let n = p.len().min(q.len());
    if n > EMD_MAX_POINTS {
        return Err(PctError::Size(format!(
            "exact EMD on {n} matched points exceeds {EMD_MAX_POINTS}; evaluate per voxel instead"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = subsample(p, n, &mut rng);
    let q = subsample(q, n, &mut rng);
    let mut cost = Vec::with_capacity(n * n);
    for a in &p {
        cost.extend(q.iter().map(|b| squared_distance(a, b)));
    }
    let assignment = hungarian(&cost, n);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

/// Statistics of the distance from every original point to its closest
/// reconstructed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NnStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub mse: f64,
}

pub fn nn_stats(original: &[Point], reconstruction: &[Point]) -> Result<NnStats> {
    non_empty("original", original)?;
    non_empty("reconstruction", reconstruction)?;
    let sq = nearest_squared(original, reconstruction);
    let d: Vec<f64> = sq.iter().map(|s| s.sqrt()).collect();
    let m = mean(&d);
    let variance = d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / d.len() as f64;
    Ok(NnStats { mean: m, variance, mse: mean(&sq) })
}

/// Which scalars count as retained when computing a compression ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioAccounting {
    /// Only the codes: `l M / 3N`.
    CodeOnly,
    /// Codes, 12 normalization scalars per code and raw-bypass coordinates.
    #[default]
    Full,
}

pub fn ratio_from_counts(
    code_len: usize,
    coded: usize,
    bypass_points: usize,
    total_points: usize,
    accounting: RatioAccounting,
) -> f64 {
    let scalars = match accounting {
        RatioAccounting::CodeOnly => code_len * coded,
        RatioAccounting::Full => code_len * coded + 12 * coded + 3 * bypass_points,
    };
    scalars as f64 / (3 * total_points) as f64
}

pub fn compression_ratio(stream: &CodeStream, total_points: usize, accounting: RatioAccounting) -> Result<f64> {
    if total_points == 0 {
        return Err(PctError::Empty("compression ratio of an empty cloud".into()));
    }
    Ok(ratio_from_counts(
        stream.code_len,
        stream.coded_count(),
        stream.bypass_point_count(),
        total_points,
        accounting,
    ))
}

/// Points of `cloud` grouped by the voxel of `spec` they fall in.
pub fn group_by_voxel(cloud: &PointCloud, spec: &VoxelSpec) -> Result<BTreeMap<VoxelIndex, Vec<Point>>> {
    Ok(partition(cloud, spec)?
        .voxels
        .into_iter()
        .map(|(k, v)| (k, v.points))
        .collect())
}

/// Point-weighted mean of per-voxel EMDs between the voxels of `original`
/// and the reconstruction assigned to each voxel. Voxels without
/// reconstructed points are skipped and sets above [`EMD_MAX_POINTS`] are
/// subsampled.
pub fn voxel_emd(
    original: &PointCloud,
    reconstruction: &BTreeMap<VoxelIndex, Vec<Point>>,
    spec: &VoxelSpec,
    seed: u64,
) -> Result<f64> {
    let a = partition(original, spec)?;
    let mut total = 0.0;
    let mut weight = 0usize;
    for (index, members) in &a.voxels {
        let Some(rec) = reconstruction.get(index).filter(|r| !r.is_empty()) else { continue };
        let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(seed, *index));
        let p = subsample(&members.points, EMD_MAX_POINTS, &mut rng);
        let q = subsample(rec, EMD_MAX_POINTS, &mut rng);
        let n = members.points.len();
        total += n as f64 * emd(&p, &q, voxel_seed(seed ^ 1, *index))?;
        weight += n;
    }
    if weight == 0 {
        return Err(PctError::Empty("no voxel holds both original and reconstructed points".into()));
    }
    Ok(total / weight as f64)
}

/// One row of a metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub method: String,
    pub code_len: usize,
    pub ratio: f64,
    pub emd: f64,
    pub cd: f64,
    pub mean: f64,
    pub variance: f64,
    pub mse: f64,
    pub original_points: usize,
    pub reconstructed_points: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "method,code_len,ratio,emd,cd,mean,variance,mse";

    /// All distortion metrics of `reconstruction` against `original`.
    /// `per_voxel` says which reconstructed points belong to which voxel for
    /// the EMD; without it the reconstruction is cut with `spec`.
    #[allow(clippy::too_many_arguments)]
    pub fn measure(
        method: &str,
        code_len: usize,
        ratio: f64,
        original: &PointCloud,
        reconstruction: &PointCloud,
        per_voxel: Option<&BTreeMap<VoxelIndex, Vec<Point>>>,
        spec: &VoxelSpec,
        seed: u64,
    ) -> Result<Self> {
        let grouped;
        let per_voxel = match per_voxel {
            Some(m) => m,
            None => {
                grouped = group_by_voxel(reconstruction, spec)?;
                &grouped
            }
        };
        let stats = nn_stats(&original.points, &reconstruction.points)?;
        Ok(MetricsReport {
            method: method.to_string(),
            code_len,
            ratio,
            emd: voxel_emd(original, per_voxel, spec, seed)?,
            cd: chamfer(&original.points, &reconstruction.points)?,
            mean: stats.mean,
            variance: stats.variance,
            mse: stats.mse,
            original_points: original.len(),
            reconstructed_points: reconstruction.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.method, self.code_len, self.ratio, self.emd, self.cd, self.mean, self.variance, self.mse
        )
    }

    /// Mean of every numeric column; point counts are summed.
    pub fn aggregate(method: &str, reports: &[MetricsReport]) -> Result<Self> {
        let Some(first) = reports.first() else {
            return Err(PctError::Empty("no reports to aggregate".into()));
        };
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / reports.len() as f64;
        Ok(MetricsReport {
            method: method.to_string(),
            code_len: first.code_len,
            ratio: avg(|r| r.ratio),
            emd: avg(|r| r.emd),
            cd: avg(|r| r.cd),
            mean: avg(|r| r.mean),
            variance: avg(|r| r.variance),
            mse: avg(|r| r.mse),
            original_points: reports.iter().map(|r| r.original_points).sum(),
            reconstructed_points: reports.iter().map(|r| r.reconstructed_points).sum(),
        })
    }
}

/// `# `-prefixed provenance lines followed by the header and rows.
pub fn metrics_csv(provenance: &str, reports: &[MetricsReport]) -> String {
    let mut out = comment_block(provenance);
    out.push_str(MetricsReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

pub fn comment_block(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        let _ = writeln!(out, "# {line}");
    }
    out
}
