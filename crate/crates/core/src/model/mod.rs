//! The voxel-level codec: normalization net, encoder and decoder.

mod codec;
mod config;
mod gin;
mod stream;

use std::rc::Rc;

pub use codec::{
    codec_roundtrip, decode, decode_cloud, decode_voxels, denormalize, encode, encode_cloud, normalize, CodecOutput,
    NormalizationParams, VoxelCode, VoxelEntry,
};
pub use config::{Aggregation, DecoderKind, EncoderKind, GraphFrame, ModelConfig};
pub use gin::{gin_conv, BranchGraph, GinLayer};
pub use stream::{decode_stream, encode_stream, load_stream, save_stream, CodeStream, STREAM_MAGIC, STREAM_VERSION};

use crate::autodiff::{Mlp, ParamSpec, ParamStore, Tape, Tensor, Var};
use crate::error::{PctError, Result};
use crate::graph::build_graph_set;
use crate::pc_io::Point;

/// A model is its architecture plus one named tensor per weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Freshly initialized weights for `config`, drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::initialize(&param_specs(&config), seed)?;
        Ok(Model { config, params })
    }

    /// Pairs `params` with `config`, checking that every expected tensor exists
    /// with the right shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        for s in &specs {
            params.expect(&s.name, s.rows, s.cols)?;
        }
        if specs.len() != params.len() {
            return Err(PctError::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                specs.len()
            )));
        }
        Ok(Model { config, params })
    }
}

pub fn norm_net(config: &ModelConfig) -> Mlp {
    let mut widths = vec![3];
    widths.extend(&config.norm_widths);
    Mlp::new("norm.feat", widths)
}

fn norm_heads(config: &ModelConfig) -> (Mlp, Mlp) {
    let f = *config.norm_widths.last().expect("validated");
    (Mlp::new("norm.scale", vec![f, 3]), Mlp::new("norm.rot", vec![f, 6]))
}

pub fn gin_layers(config: &ModelConfig) -> Vec<GinLayer> {
    config
        .gin_layer_widths()
        .iter()
        .enumerate()
        .map(|(l, &(i, o))| GinLayer {
            prefix: format!("enc.gin{l}"),
            ks: config.ks.clone(),
            in_width: i,
            branch_widths: config.branch_widths.clone(),
            combiner_widths: config.combiner_widths.clone(),
            out_width: o,
        })
        .collect()
}

pub fn pointnet(config: &ModelConfig) -> Mlp {
    let mut widths = vec![3];
    widths.extend(&config.pointnet_widths);
    widths.push(config.code_len);
    Mlp::new("enc.pointnet", widths)
}

pub fn fc_decoder(config: &ModelConfig) -> Mlp {
    let mut widths = vec![config.code_len];
    widths.extend(&config.fc_widths);
    widths.push(3 * config.decoder_points);
    Mlp::new("dec.fc", widths)
}

pub fn fold_nets(config: &ModelConfig) -> (Mlp, Mlp) {
    let mk = |name: &str, input: usize| {
        let mut widths = vec![input];
        widths.extend(&config.fold_widths);
        widths.push(3);
        Mlp::new(name, widths)
    };
    (mk("dec.fold1", config.code_len + 2), mk("dec.fold2", config.code_len + 3))
}

/// Every parameter tensor the configuration uses.
pub fn param_specs(config: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    if config.normalization {
        specs.extend(norm_net(config).param_specs());
        let (s, r) = norm_heads(config);
        specs.extend(s.param_specs());
        specs.extend(r.param_specs());
    }
    match config.encoder {
        EncoderKind::Gin => {
            for l in gin_layers(config) {
                specs.extend(l.param_specs());
            }
        }
        EncoderKind::PointNet => specs.extend(pointnet(config).param_specs()),
    }
    match config.decoder {
        DecoderKind::FullyConnected => specs.extend(fc_decoder(config).param_specs()),
        DecoderKind::Folding => {
            let (a, b) = fold_nets(config);
            specs.extend(a.param_specs());
            specs.extend(b.param_specs());
        }
    }
    specs
}

/// Tape handles of the normalization applied to one voxel.
#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub centroid: Point,
    /// `1 x 3` scale `s`.
    pub scale: Var,
    /// `3 x 3` rotation `R`.
    pub rotation: Var,
    /// `1 x 6` raw rotation head output.
    pub rot6: Var,
}

/// Tape handles produced by encoding one voxel.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `1 x code_len`.
    pub code: Var,
    pub norm: NormVars,
    /// `n x 3` normalized points fed to the encoder.
    pub normalized: Var,
}

pub fn centroid(points: &[Point]) -> Point {
    let mut c = [0.0; 3];
    for p in points {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    let n = points.len() as f64;
    c.map(|v| v / n)
}

/// `q_i = ((p_i - mu) R) / s` on the tape. Without a normalization net the
/// scale is one and the rotation the identity.
pub fn normalize_on_tape(config: &ModelConfig, tape: &mut Tape, points: &[Point]) -> Result<(Var, NormVars)> {
    if points.is_empty() {
        return Err(PctError::Empty("cannot normalize an empty voxel".into()));
    }
    let mu = centroid(points);
    let centered: Vec<Point> = points
        .iter()
        .map(|p| [p[0] - mu[0], p[1] - mu[1], p[2] - mu[2]])
        .collect();
    let centered = tape.input(Tensor::from_points(&centered));
    if !config.normalization {
        let scale = tape.input(Tensor::row_vector(vec![1.0; 3]));
        let rot6 = tape.input(Tensor::row_vector(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let rotation = tape.input(Tensor::identity(3));
        let norm = NormVars { centroid: mu, scale, rotation, rot6 };
        return Ok((centered, norm));
    }
    let feat = norm_net(config).forward(tape, centered)?;
    let pooled = tape.max_rows(feat);
    let (sh, rh) = norm_heads(config);
    let log_s = sh.forward(tape, pooled)?;
    let rot6 = rh.forward(tape, pooled)?;
    let scale = tape.exp(log_s);
    let neg = tape.scale(log_s, -1.0);
    let inv_s = tape.exp(neg);
    let rotation = tape.rot6d(rot6);
    let rotated = tape.matmul(centered, rotation);
    let q = tape.mul_row(rotated, inv_s);
    Ok((q, NormVars { centroid: mu, scale, rotation, rot6 }))
}

/// `p_i = (q_i * s) R^T + mu` on the tape.
pub fn denormalize_on_tape(tape: &mut Tape, q: Var, norm: &NormVars) -> Var {
    let scaled = tape.mul_row(q, norm.scale);
    let rt = tape.transpose(norm.rotation);
    let rotated = tape.matmul(scaled, rt);
    let mu = tape.input(Tensor::row_vector(norm.centroid.to_vec()));
    tape.add_row(rotated, mu)
}

/// Normalizes, builds the inception graphs on the normalized points and runs
/// the encoder. `points` are unit-cube coordinates of one voxel.
pub fn encode_on_tape(config: &ModelConfig, tape: &mut Tape, points: &[Point]) -> Result<Encoded> {
    let (q, norm) = normalize_on_tape(config, tape, points)?;
    let code = match config.encoder {
        EncoderKind::Gin => {
            let qpts = tape.value(q).to_points();
            let gs = build_graph_set(&qpts, &config.ks)?;
            for g in &gs.graphs {
                tape.note_kink(&g.neighbors);
            }
            let graphs: Vec<BranchGraph> = match config.graph_frame {
                GraphFrame::Local => gs
                    .graphs
                    .iter()
                    .map(|g| BranchGraph::differentiable(tape, g, q))
                    .collect(),
                GraphFrame::World => {
                    let h = config.voxel_size;
                    let world: Vec<Point> = points.iter().map(|p| [p[0] * h[0], p[1] * h[1], p[2] * h[2]]).collect();
                    let wv = tape.input(Tensor::from_points(&world));
                    gs.graphs
                        .iter()
                        .map(|g| BranchGraph::differentiable(tape, g, wv))
                        .collect()
                }
            };
            let layers = gin_layers(config);
            let mut x = q;
            for (l, layer) in layers.iter().enumerate() {
                x = layer.forward(tape, x, &graphs)?;
                if l + 1 < layers.len() {
                    x = tape.relu(x);
                }
            }
            match config.aggregation {
                Aggregation::Mean => tape.mean_rows(x),
                Aggregation::Max => tape.max_rows(x),
            }
        }
        EncoderKind::PointNet => {
            let x = pointnet(config).forward(tape, q)?;
            tape.max_rows(x)
        }
    };
    Ok(Encoded { code, norm, normalized: q })
}

/// Unit square grid of the folding decoder, row-major.
pub fn folding_grid(side: usize) -> Tensor {
    let step = 1.0 / (side - 1) as f64;
    let mut data = Vec::with_capacity(2 * side * side);
    for a in 0..side {
        for b in 0..side {
            data.push(a as f64 * step);
            data.push(b as f64 * step);
        }
    }
    Tensor::from_vec(side * side, 2, data)
}

/// Decodes a `1 x code_len` code into `m x 3` points in the normalized frame.
pub fn decode_on_tape(config: &ModelConfig, tape: &mut Tape, code: Var) -> Result<Var> {
    let (_, l) = tape.shape(code);
    if l != config.code_len {
        return Err(PctError::dim("code", config.code_len, l));
    }
    match config.decoder {
        DecoderKind::FullyConnected => {
            let flat = fc_decoder(config).forward(tape, code)?;
            Ok(tape.reshape(flat, config.decoder_points, 3))
        }
        DecoderKind::Folding => {
            let m = config.grid_side * config.grid_side;
            let (f1, f2) = fold_nets(config);
            let c = tape.repeat_rows(code, m);
            let grid = tape.input(folding_grid(config.grid_side));
            let in1 = tape.concat_cols(&[c, grid]);
            let fold1 = f1.forward(tape, in1)?;
            let in2 = tape.concat_cols(&[c, fold1]);
            f2.forward(tape, in2)
        }
    }
}

/// Chamfer loss of one voxel: encode, decode, denormalize, compare against
/// the input points (all in the unit-cube frame).
pub fn voxel_loss(config: &ModelConfig, tape: &mut Tape, points: &[Point], target: Rc<Tensor>) -> Result<Var> {
    let enc = encode_on_tape(config, tape, points)?;
    let q_hat = decode_on_tape(config, tape, enc.code)?;
    let p_hat = denormalize_on_tape(tape, q_hat, &enc.norm);
    Ok(tape.chamfer(p_hat, target))
}

#[cfg(test)]
mod tests;
