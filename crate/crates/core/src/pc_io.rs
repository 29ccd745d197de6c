//! Point cloud ingestion and emission.
//!
//! Two formats are supported:
//!
//! * KITTI Velodyne sweeps (`.bin`): a headerless sequence of little-endian
//!   `f32` quadruples `(x, y, z, reflectance)`, 16 bytes per point.
//! * Plain text (`.xyz`): one point per line, three whitespace-separated
//!   decimals. Written with 17 significant digits so that `f64` coordinates
//!   survive a round trip unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PctError, Result};

/// A 3D coordinate in meters.
pub type Point = [f64; 3];

const KITTI_RECORD_BYTES: usize = 16;

/// An ordered sequence of points with optional per-point reflectance.
///
/// Reflectance is carried so that KITTI sweeps can be written back
/// byte-for-byte; the codec itself only looks at `points`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub reflectance: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        PointCloud {
            points,
            reflectance: None,
        }
    }

    pub fn with_reflectance(points: Vec<Point>, reflectance: Vec<f32>) -> Result<Self> {
        if reflectance.len() != points.len() {
            return Err(PctError::dim("reflectance", points.len(), reflectance.len()));
        }
        Ok(PointCloud {
            points,
            reflectance: Some(reflectance),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Fails with a data error naming the first non-finite coordinate.
    pub fn check_finite(&self) -> Result<()> {
        match self
            .points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            Some(i) => Err(PctError::Data(format!("non-finite coordinate at point {i}"))),
            None => Ok(()),
        }
    }
}

/// Decodes an in-memory KITTI `.bin` buffer.
pub fn parse_kitti_bin(bytes: &[u8]) -> Result<PointCloud> {
    let residual = bytes.len() % KITTI_RECORD_BYTES;
    if residual != 0 {
        return Err(PctError::Format(format!(
            "KITTI sweep size {} is not a multiple of {KITTI_RECORD_BYTES} bytes ({residual} residual bytes)",
            bytes.len()
        )));
    }
    let n = bytes.len() / KITTI_RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut reflectance = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(KITTI_RECORD_BYTES).enumerate() {
        let mut v = [0f32; 4];
        for (k, word) in rec.chunks_exact(4).enumerate() {
            v[k] = f32::from_le_bytes([word[0], word[1], word[2], word[3]]);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(PctError::Data(format!("non-finite value in record {i}")));
        }
        points.push([v[0] as f64, v[1] as f64, v[2] as f64]);
        reflectance.push(v[3]);
    }
    Ok(PointCloud {
        points,
        reflectance: Some(reflectance),
    })
}

pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PctError::io(path, e))?;
    parse_kitti_bin(&bytes).map_err(|e| match e {
        PctError::Format(m) => PctError::Format(format!("{}: {m}", path.display())),
        PctError::Data(m) => PctError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes a cloud as KITTI records. Coordinates are narrowed to `f32`;
/// missing reflectance is written as zero.
pub fn encode_kitti_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * KITTI_RECORD_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let r = cloud.reflectance.as_ref().map_or(0.0, |r| r[i]);
        for v in [p[0] as f32, p[1] as f32, p[2] as f32, r] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_kitti_bin(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_kitti_bin(cloud)).map_err(|e| PctError::io(path, e))
}

pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(PctError::Format(format!(
                "line {}: expected 3 coordinates, found {}",
                lineno + 1,
                fields.len()
            )));
        }
        let mut p = [0.0; 3];
        for (k, f) in fields.iter().enumerate() {
            p[k] = f.parse::<f64>().map_err(|e| {
                PctError::Format(format!("line {}: cannot parse `{f}`: {e}", lineno + 1))
            })?;
            if !p[k].is_finite() {
                return Err(PctError::Data(format!(
                    "line {}: non-finite coordinate",
                    lineno + 1
                )));
            }
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e}", p[0], p[1], p[2]);
    }
    s
}

pub fn load_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| PctError::io(path, e))?;
    parse_xyz(&text).map_err(|e| match e {
        PctError::Format(m) => PctError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn save_xyz(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_xyz(cloud)).map_err(|e| PctError::io(path, e))
}

/// Loads `.bin` as a KITTI sweep and anything else as `.xyz` text.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_kitti_bin(path),
        _ => load_xyz(path),
    }
}

/// Seeded train/test partition of a list of sweep files.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train_paths: Vec<PathBuf>,
    pub test_paths: Vec<PathBuf>,
    pub seed: u64,
}

/// Shuffles `paths` with a seeded ChaCha8 stream and puts the first
/// `floor(train_fraction * n)` into the training set.
pub fn split_dataset(paths: &[PathBuf], train_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if paths.is_empty() {
        return Err(PctError::Empty("no sweep paths to split".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PctError::Config(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut shuffled = paths.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);
    let n_train = (train_fraction * paths.len() as f64).floor() as usize;
    let test_paths = shuffled.split_off(n_train);
    Ok(DatasetSplit {
        train_paths: shuffled,
        test_paths,
        seed,
    })
}
