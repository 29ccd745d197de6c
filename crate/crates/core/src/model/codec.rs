use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{decode_on_tape, denormalize_on_tape, encode_on_tape, normalize_on_tape, Model, NormVars};
use super::stream::CodeStream;
use crate::autodiff::{rotation_or_identity, Tape, Tensor};
use crate::error::{PctError, Result};
use crate::pc_io::{Point, PointCloud};
use crate::voxelize::{partition, VoxelIndex, VoxelSpec};

/// Per-voxel geometry kept beside the code so decoded points can be put
/// back: centroid, positive scale and the 6 numbers defining the rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub centroid: Point,
    pub scale: [f64; 3],
    pub rot6: [f64; 6],
}

impl NormalizationParams {
    pub const IDENTITY_ROT6: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

    /// Row-major rotation matrix, identity if the 6 numbers are degenerate.
    pub fn rotation(&self) -> [[f64; 3]; 3] {
        rotation_or_identity(&self.rot6)
    }

    fn on_tape(&self, tape: &mut Tape) -> NormVars {
        let r = self.rotation();
        NormVars {
            centroid: self.centroid,
            scale: tape.input(Tensor::row_vector(self.scale.to_vec())),
            rotation: tape.input(Tensor::from_vec(3, 3, r.iter().flatten().copied().collect())),
            rot6: tape.input(Tensor::row_vector(self.rot6.to_vec())),
        }
    }

    fn read(tape: &Tape, norm: &NormVars) -> Self {
        let s = tape.value(norm.scale).data();
        let r = tape.value(norm.rot6).data();
        NormalizationParams {
            centroid: norm.centroid,
            scale: [s[0], s[1], s[2]],
            rot6: [r[0], r[1], r[2], r[3], r[4], r[5]],
        }
    }
}

/// Learned representation of one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelCode {
    pub voxel_index: VoxelIndex,
    /// Points in the voxel before encoding.
    pub n: usize,
    pub code: Vec<f64>,
    pub norm: NormalizationParams,
}

/// One voxel of a code stream: either a code or its raw points.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelEntry {
    Coded(VoxelCode),
    /// Too sparse to encode; world coordinates stored verbatim.
    Raw { voxel_index: VoxelIndex, points: Vec<Point> },
}

impl VoxelEntry {
    pub fn voxel_index(&self) -> VoxelIndex {
        match self {
            VoxelEntry::Coded(c) => c.voxel_index,
            VoxelEntry::Raw { voxel_index, .. } => *voxel_index,
        }
    }

    pub fn point_count(&self) -> usize {
        match self {
            VoxelEntry::Coded(c) => c.n,
            VoxelEntry::Raw { points, .. } => points.len(),
        }
    }
}

/// Normalizes unit-cube points with the model's normalization net.
pub fn normalize(model: &Model, points: &[Point]) -> Result<(Vec<Point>, NormalizationParams)> {
    let mut tape = Tape::new(&model.params);
    let (q, norm) = normalize_on_tape(&model.config, &mut tape, points)?;
    Ok((tape.value(q).to_points(), NormalizationParams::read(&tape, &norm)))
}

/// Inverse of [`normalize`]: `p = (q * s) R^T + mu`.
pub fn denormalize(q: &[Point], norm: &NormalizationParams) -> Vec<Point> {
    let store = Default::default();
    let mut tape = Tape::new(&store);
    let nv = norm.on_tape(&mut tape);
    let qv = tape.input(Tensor::from_points(q));
    let p = denormalize_on_tape(&mut tape, qv, &nv);
    tape.value(p).to_points()
}

/// Encodes the unit-cube points of one voxel.
pub fn encode(model: &Model, voxel_index: VoxelIndex, points: &[Point]) -> Result<VoxelCode> {
    if points.is_empty() {
        return Err(PctError::Empty(format!("voxel {voxel_index:?} has no points to encode")));
    }
    let mut tape = Tape::new(&model.params);
    let enc = encode_on_tape(&model.config, &mut tape, points)?;
    let code = tape.value(enc.code).data().to_vec();
    if !code.iter().all(|v| v.is_finite()) {
        return Err(PctError::Numeric(format!("non-finite code for voxel {voxel_index:?}")));
    }
    Ok(VoxelCode {
        voxel_index,
        n: points.len(),
        code,
        norm: NormalizationParams::read(&tape, &enc.norm),
    })
}

/// Decodes a voxel code to unit-cube points.
pub fn decode(model: &Model, code: &VoxelCode) -> Result<Vec<Point>> {
    if !code.code.iter().all(|v| v.is_finite()) {
        return Err(PctError::Numeric(format!("non-finite code for voxel {:?}", code.voxel_index)));
    }
    let mut tape = Tape::new(&model.params);
    let c = tape.input(Tensor::row_vector(code.code.clone()));
    let q = decode_on_tape(&model.config, &mut tape, c)?;
    let nv = code.norm.on_tape(&mut tape);
    let p = denormalize_on_tape(&mut tape, q, &nv);
    Ok(tape.value(p).to_points())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodecOutput {
    pub stream: CodeStream,
    pub reconstruction: PointCloud,
}

/// Partitions `cloud`, encodes every voxel with at least `n_min` points and
/// passes sparser voxels through raw.
pub fn encode_cloud(model: &Model, cloud: &PointCloud, spec: &VoxelSpec, n_min: usize) -> Result<CodeStream> {
    let vox = partition(cloud, spec)?;
    let entries = vox
        .voxels
        .par_iter()
        .map(|(&index, members)| {
            if members.points.len() < n_min.max(1) {
                return Ok(VoxelEntry::Raw {
                    voxel_index: index,
                    points: members.points.clone(),
                });
            }
            let local: Vec<Point> = members.points.iter().map(|p| spec.to_local_point(index, p)).collect();
            encode(model, index, &local).map(VoxelEntry::Coded)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CodeStream {
        spec: *spec,
        code_len: model.config.code_len,
        entries,
    })
}

/// Decodes every voxel of a stream and concatenates them in voxel index order.
pub fn decode_cloud(model: &Model, stream: &CodeStream) -> Result<PointCloud> {
    if stream.code_len != model.config.code_len {
        return Err(PctError::dim("stream code length", model.config.code_len, stream.code_len));
    }
    let decoded = decode_voxels(model, stream)?;
    Ok(PointCloud::new(decoded.into_values().flatten().collect()))
}

/// World-frame reconstruction of every voxel, keyed by voxel index.
pub fn decode_voxels(model: &Model, stream: &CodeStream) -> Result<BTreeMap<VoxelIndex, Vec<Point>>> {
    let spec = stream.spec;
    let per_voxel = stream
        .entries
        .par_iter()
        .map(|e| match e {
            VoxelEntry::Raw { voxel_index, points } => Ok((*voxel_index, points.clone())),
            VoxelEntry::Coded(c) => {
                let local = decode(model, c)?;
                let world = local.iter().map(|q| spec.from_local_point(c.voxel_index, q)).collect();
                Ok((c.voxel_index, world))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = BTreeMap::new();
    for (k, v) in per_voxel {
        if out.insert(k, v).is_some() {
            return Err(PctError::Data(format!("voxel {k:?} appears twice in the code stream")));
        }
    }
    Ok(out)
}

/// Partition, encode, decode and synthesize in one pass.
pub fn codec_roundtrip(model: &Model, cloud: &PointCloud, spec: &VoxelSpec, n_min: usize) -> Result<CodecOutput> {
    let stream = encode_cloud(model, cloud, spec, n_min)?;
    let reconstruction = decode_cloud(model, &stream)?;
    Ok(CodecOutput { stream, reconstruction })
}
