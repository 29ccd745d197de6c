//! Seeded synthetic sweeps made of planar and edge patches, one patch per
//! voxel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{PctError, Result};
use crate::pc_io::{Point, PointCloud};
use crate::voxelize::{voxel_seed, VoxelIndex, VoxelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub sweeps: usize,
    pub voxels_per_sweep: usize,
    pub min_points: usize,
    pub max_points: usize,
    /// Standard deviation of the off-surface noise, unit-cube units.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            sweeps: 10,
            voxels_per_sweep: 50,
            min_points: 64,
            max_points: 256,
            noise: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sweeps == 0 || self.voxels_per_sweep == 0 {
            return Err(PctError::Config("synthetic corpus needs at least one sweep and one voxel".into()));
        }
        if self.min_points == 0 || self.min_points > self.max_points {
            return Err(PctError::Config(format!(
                "synthetic point range {}..={} is empty",
                self.min_points, self.max_points
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(PctError::Config(format!("synthetic noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchKind {
    Planar,
    Edge,
}

fn unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    UnitSphere.sample(rng)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalized(a: [f64; 3]) -> [f64; 3] {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    a.map(|v| v / n)
}

/// Unit vector orthogonal to `a`.
fn orthogonal(a: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let c = cross(a, unit(rng));
        if c.iter().map(|v| v * v).sum::<f64>() > 1e-6 {
            return normalized(c);
        }
    }
}

fn inside(p: &Point) -> bool {
    p.iter().all(|&v| (0.0..1.0).contains(&v))
}

/// `n` noisy points of one patch in unit-cube coordinates.
pub fn patch(kind: PatchKind, n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let center: Point = [0, 1, 2].map(|_| rng.gen_range(0.4..0.6));
    let normal = unit(rng);
    let u = orthogonal(normal, rng);
    let v = cross(normal, u);
    // Edge: a second half-plane hinged on `u`, folded by 60 to 150 degrees.
    let fold = rng.gen_range(std::f64::consts::FRAC_PI_3..2.5);
    let w = [0, 1, 2].map(|k| fold.cos() * v[k] + fold.sin() * normal[k]);
    let w_normal = cross(u, w);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let a: f64 = rng.gen_range(-0.6..0.6);
        let b: f64 = rng.gen_range(-0.6..0.6);
        let z: f64 = StandardNormal.sample(rng);
        let eps = noise * z;
        let (dir, off, b) = match kind {
            PatchKind::Edge if b < 0.0 => (w, w_normal, -b),
            _ => (v, normal, b),
        };
        let p = [0, 1, 2].map(|k| center[k] + a * u[k] + b * dir[k] + eps * off[k]);
        if inside(&p) {
            out.push(p);
        }
    }
    out
}

/// Voxel indices of a sweep: a square layout in the `z = 1` slab.
pub fn sweep_layout(voxels: usize) -> Vec<VoxelIndex> {
    let side = (voxels as f64).sqrt().ceil() as i64;
    (0..voxels as i64).map(|i| [i / side + 1, i % side + 1, 1]).collect()
}

/// One sweep of `config.voxels_per_sweep` patches, in world coordinates on a
/// grid of `sizes` anchored at the origin.
pub fn synthetic_sweep(config: &SynthConfig, sweep: usize, sizes: [f64; 3]) -> Result<PointCloud> {
    config.validate()?;
    let spec = VoxelSpec::new(sizes, [0.0; 3])?;
    let mut points = Vec::new();
    for index in sweep_layout(config.voxels_per_sweep) {
        let mut rng = ChaCha8Rng::seed_from_u64(voxel_seed(config.seed ^ ((sweep as u64) << 32), index));
        let n = rng.gen_range(config.min_points..=config.max_points);
        let kind = if rng.gen_bool(0.5) { PatchKind::Planar } else { PatchKind::Edge };
        points.extend(patch(kind, n, config.noise, &mut rng).iter().map(|q| spec.from_local_point(index, q)));
    }
    Ok(PointCloud::new(points))
}

pub fn synthetic_sweeps(config: &SynthConfig, sizes: [f64; 3]) -> Result<Vec<PointCloud>> {
    (0..config.sweeps).map(|s| synthetic_sweep(config, s, sizes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelize::partition;

    #[test]
    fn planar_patch_is_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts = patch(PatchKind::Planar, 200, 0.0, &mut rng);
        assert_eq!(pts.len(), 200);
        assert!(pts.iter().all(inside));
        // Every point lies on the plane through the first three.
        let e1 = [0, 1, 2].map(|k| pts[1][k] - pts[0][k]);
        let e2 = [0, 1, 2].map(|k| pts[2][k] - pts[0][k]);
        let n = normalized(cross(e1, e2));
        for p in &pts {
            let d: f64 = (0..3).map(|k| (p[k] - pts[0][k]) * n[k]).sum();
            assert!(d.abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_voxels_hold_one_patch_each() {
        let cfg = SynthConfig { voxels_per_sweep: 7, seed: 3, ..Default::default() };
        let cloud = synthetic_sweep(&cfg, 0, [1.0, 1.0, 10.0]).unwrap();
        let vc = partition(&cloud, &VoxelSpec::new([1.0, 1.0, 10.0], [0.0; 3]).unwrap()).unwrap();
        assert_eq!(vc.voxel_count(), 7);
        for m in vc.voxels.values() {
            assert!((64..=256).contains(&m.points.len()));
        }
        assert_eq!(cloud, synthetic_sweep(&cfg, 0, [1.0, 1.0, 10.0]).unwrap());
        assert_ne!(cloud, synthetic_sweep(&cfg, 1, [1.0, 1.0, 10.0]).unwrap());
    }
}
