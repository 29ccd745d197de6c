//! Equally spaced voxel partition and its inverse.
//!
//! Voxel `(h, w, d)` covers the half-open box
//! `[o + (h-1)H, o + hH) x [o + (w-1)W, o + wW) x [o + (d-1)D, o + dD)`
//! where `o` is the grid origin. Indices are signed so that points below the
//! origin still get a voxel.

use std::collections::BTreeMap;

use crate::error::{PctError, Result};
use crate::pc_io::{Point, PointCloud};

/// Signed `(h, w, d)` voxel index. Ordering is lexicographic.
pub type VoxelIndex = [i64; 3];

/// Grid geometry: voxel extents along X, Y, Z and the anchor of voxel `(1, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelSpec {
    pub sizes: [f64; 3],
    pub origin: Point,
}

impl VoxelSpec {
    pub fn new(sizes: [f64; 3], origin: Point) -> Result<Self> {
        let spec = VoxelSpec { sizes, origin };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid whose origin is the bounding-box minimum floored to a multiple of
    /// the voxel size, so the grid does not depend on point order.
    pub fn anchored(sizes: [f64; 3], cloud: &PointCloud) -> Result<Self> {
        let mut origin = [0.0; 3];
        if !cloud.is_empty() {
            cloud.check_finite()?;
            for (k, o) in origin.iter_mut().enumerate() {
                let min = cloud.points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
                *o = (min / sizes[k]).floor() * sizes[k];
            }
        }
        VoxelSpec::new(sizes, origin)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(PctError::Config(format!(
                "voxel sizes must be positive and finite, got {:?}",
                self.sizes
            )));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(PctError::Config("voxel origin must be finite".into()));
        }
        Ok(())
    }

    pub fn index_of(&self, p: &Point) -> VoxelIndex {
        let mut idx = [0i64; 3];
        for k in 0..3 {
            idx[k] = ((p[k] - self.origin[k]) / self.sizes[k]).floor() as i64 + 1;
        }
        idx
    }

    pub fn lower_corner(&self, index: VoxelIndex) -> Point {
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = self.origin[k] + (index[k] - 1) as f64 * self.sizes[k];
        }
        c
    }

    /// World point to unit-cube coordinates of the voxel it falls in.
    pub fn to_local_point(&self, index: VoxelIndex, p: &Point) -> Point {
        let mut q = [0.0; 3];
        for k in 0..3 {
            q[k] = (p[k] - self.origin[k]) / self.sizes[k] - (index[k] - 1) as f64;
        }
        q
    }

    pub fn from_local_point(&self, index: VoxelIndex, q: &Point) -> Point {
        let mut p = [0.0; 3];
        for k in 0..3 {
            p[k] = self.origin[k] + (q[k] + (index[k] - 1) as f64) * self.sizes[k];
        }
        p
    }
}

/// Member points of one voxel, in world coordinates, with their positions in
/// the source cloud.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VoxelMembers {
    pub points: Vec<Point>,
    pub source_indices: Vec<usize>,
}

/// Partition result: every input point sits in exactly one non-empty voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelizedCloud {
    pub spec: VoxelSpec,
    pub voxels: BTreeMap<VoxelIndex, VoxelMembers>,
    pub point_count: usize,
}

impl VoxelizedCloud {
    /// Number of non-empty voxels.
    pub fn voxel_count(&self) -> usize {
        self.voxels.len()
    }
}

/// A voxel's points in unit-cube coordinates, i.e. `(p - corner) / (H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalVoxel {
    pub voxel_index: VoxelIndex,
    pub local_points: Vec<Point>,
}

impl LocalVoxel {
    pub fn n(&self) -> usize {
        self.local_points.len()
    }
}

/// Seed of the random stream belonging to one voxel, so per-voxel sampling
/// does not depend on iteration order or thread count.
pub fn voxel_seed(seed: u64, index: VoxelIndex) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for i in index {
        h = (h ^ i as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

pub fn partition(cloud: &PointCloud, spec: &VoxelSpec) -> Result<VoxelizedCloud> {
    spec.validate()?;
    cloud.check_finite()?;
    let mut voxels: BTreeMap<VoxelIndex, VoxelMembers> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        let v = voxels.entry(spec.index_of(p)).or_default();
        v.points.push(*p);
        v.source_indices.push(i);
    }
    Ok(VoxelizedCloud {
        spec: *spec,
        voxels,
        point_count: cloud.len(),
    })
}

pub fn to_local(voxelized: &VoxelizedCloud, index: VoxelIndex) -> Result<LocalVoxel> {
    let members = voxelized
        .voxels
        .get(&index)
        .filter(|m| !m.points.is_empty())
        .ok_or_else(|| PctError::Lookup(format!("voxel {index:?} is empty or unknown")))?;
    Ok(LocalVoxel {
        voxel_index: index,
        local_points: members
            .points
            .iter()
            .map(|p| voxelized.spec.to_local_point(index, p))
            .collect(),
    })
}

pub fn from_local(spec: &VoxelSpec, local: &LocalVoxel) -> Vec<Point> {
    local
        .local_points
        .iter()
        .map(|q| spec.from_local_point(local.voxel_index, q))
        .collect()
}

/// Maps per-voxel unit-cube reconstructions back to world coordinates and
/// concatenates them in lexicographic voxel order.
pub fn synthesis(reconstructed: &BTreeMap<VoxelIndex, Vec<Point>>, spec: &VoxelSpec) -> Result<PointCloud> {
    spec.validate()?;
    let total = reconstructed.values().map(Vec::len).sum();
    let mut points = Vec::with_capacity(total);
    for (&index, local) in reconstructed {
        points.extend(local.iter().map(|q| spec.from_local_point(index, q)));
    }
    Ok(PointCloud::new(points))
}
