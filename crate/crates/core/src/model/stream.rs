//! Code stream format.
//!
//! ```text
//! "PCTC"  u32 version
//! f64 sizes[3]  f64 origin[3]  u32 code_len  u64 voxel_count
//! repeat voxel_count:
//!     i64 index[3]  u64 n  u8 bypass
//!     bypass = 1: f64 points[n][3]              (world coordinates)
//!     bypass = 0: f64 c[code_len]  f64 mu[3]  f64 s[3]  f64 rot6[6]
//! ```
//! Little-endian throughout.

use std::fs;
use std::path::Path;

use super::codec::{NormalizationParams, VoxelCode, VoxelEntry};
use crate::autodiff::checkpoint::Reader;
use crate::error::{PctError, Result};
use crate::voxelize::VoxelSpec;

pub const STREAM_MAGIC: &[u8; 4] = b"PCTC";
pub const STREAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CodeStream {
    pub spec: VoxelSpec,
    pub code_len: usize,
    /// In ascending voxel index order.
    pub entries: Vec<VoxelEntry>,
}

impl CodeStream {
    pub fn coded_count(&self) -> usize {
        self.entries.iter().filter(|e| matches!(e, VoxelEntry::Coded(_))).count()
    }

    pub fn bypass_point_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                VoxelEntry::Raw { points, .. } => points.len(),
                VoxelEntry::Coded(_) => 0,
            })
            .sum()
    }

    pub fn point_count(&self) -> usize {
        self.entries.iter().map(VoxelEntry::point_count).sum()
    }
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_stream(stream: &CodeStream) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(STREAM_MAGIC);
    out.extend_from_slice(&STREAM_VERSION.to_le_bytes());
    put_f64s(&mut out, &stream.spec.sizes);
    put_f64s(&mut out, &stream.spec.origin);
    out.extend_from_slice(&(stream.code_len as u32).to_le_bytes());
    out.extend_from_slice(&(stream.entries.len() as u64).to_le_bytes());
    for e in &stream.entries {
        for i in e.voxel_index() {
            out.extend_from_slice(&i.to_le_bytes());
        }
        out.extend_from_slice(&(e.point_count() as u64).to_le_bytes());
        match e {
            VoxelEntry::Raw { points, .. } => {
                out.push(1);
                for p in points {
                    put_f64s(&mut out, p);
                }
            }
            VoxelEntry::Coded(c) => {
                out.push(0);
                put_f64s(&mut out, &c.code);
                put_f64s(&mut out, &c.norm.centroid);
                put_f64s(&mut out, &c.norm.scale);
                put_f64s(&mut out, &c.norm.rot6);
            }
        }
    }
    out
}

fn triple(r: &mut Reader) -> Result<[f64; 3]> {
    Ok([r.f64()?, r.f64()?, r.f64()?])
}

pub fn decode_stream(bytes: &[u8]) -> Result<CodeStream> {
    let mut r = Reader::new(bytes, "code stream");
    let magic = r.take(4)?;
    if magic != STREAM_MAGIC {
        return Err(PctError::Format(format!(
            "not a code stream: expected magic \"PCTC\", found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let version = r.u32()?;
    if version != STREAM_VERSION {
        return Err(PctError::Format(format!("unsupported code stream version {version}")));
    }
    let sizes = triple(&mut r)?;
    let origin = triple(&mut r)?;
    let spec = VoxelSpec::new(sizes, origin).map_err(|e| PctError::Format(format!("bad voxel spec: {e}")))?;
    let code_len = r.u32()? as usize;
    let count = r.u64()?;
    let mut entries = Vec::new();
    let mut previous = None;
    for v in 0..count {
        let voxel_index = [r.i64()?, r.i64()?, r.i64()?];
        if previous.is_some_and(|p| p >= voxel_index) {
            return Err(PctError::Format(format!("voxel {v} ({voxel_index:?}) is out of index order")));
        }
        previous = Some(voxel_index);
        let n = r.u64()? as usize;
        match r.u8()? {
            1 => {
                if n.saturating_mul(24) > bytes.len() {
                    return Err(PctError::Format(format!("voxel {v} claims {n} raw points")));
                }
                let mut points = Vec::with_capacity(n);
                for _ in 0..n {
                    points.push(triple(&mut r)?);
                }
                entries.push(VoxelEntry::Raw { voxel_index, points });
            }
            0 => {
                let mut code = Vec::with_capacity(code_len);
                for _ in 0..code_len {
                    code.push(r.f64()?);
                }
                let centroid = triple(&mut r)?;
                let scale = triple(&mut r)?;
                let mut rot6 = [0.0; 6];
                for x in &mut rot6 {
                    *x = r.f64()?;
                }
                entries.push(VoxelEntry::Coded(VoxelCode {
                    voxel_index,
                    n,
                    code,
                    norm: NormalizationParams { centroid, scale, rot6 },
                }));
            }
            f => return Err(PctError::Format(format!("voxel {v} has invalid bypass flag {f}"))),
        }
    }
    if !r.finished() {
        return Err(PctError::Format("trailing bytes after the last voxel".into()));
    }
    Ok(CodeStream { spec, code_len, entries })
}

pub fn save_stream(path: impl AsRef<Path>, stream: &CodeStream) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_stream(stream)).map_err(|e| PctError::io(path, e))
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<CodeStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| PctError::io(path, e))?;
    decode_stream(&bytes).map_err(|e| match e {
        PctError::Format(m) => PctError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
