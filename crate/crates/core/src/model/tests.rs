use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::pc_io::PointCloud;
use crate::voxelize::VoxelSpec;

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect()
}

fn small_config() -> ModelConfig {
    ModelConfig {
        code_len: 8,
        fc_widths: vec![32],
        decoder_points: 16,
        ..Default::default()
    }
}

fn zero_heads(model: &mut Model) {
    for id in 0..model.params.len() {
        if model.params.name(id).starts_with("norm.scale") || model.params.name(id).starts_with("norm.rot") {
            model.params.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn zero_heads_give_identity_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = Model::new(small_config(), 3).unwrap();
    zero_heads(&mut model);
    let pts = random_points(&mut rng, 20);
    let (q, norm) = normalize(&model, &pts).unwrap();
    assert_eq!(norm.scale, [1.0; 3]);
    assert_eq!(norm.rotation(), [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let mu = centroid(&pts);
    for (qi, pi) in q.iter().zip(&pts) {
        for k in 0..3 {
            assert!((qi[k] - (pi[k] - mu[k])).abs() < 1e-15);
        }
    }
}

#[test]
fn rotation_is_proper_for_random_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seed in 0..20 {
        let model = Model::new(small_config(), seed).unwrap();
        let pts = random_points(&mut rng, 32);
        let (_, norm) = normalize(&model, &pts).unwrap();
        let r = norm.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() <= 1e-9);
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        assert!((det - 1.0).abs() <= 1e-9);
        assert!(norm.scale.iter().all(|&s| s > 0.0));
    }
}

#[test]
fn denormalize_inverts_normalize() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..5 {
        let model = Model::new(small_config(), seed).unwrap();
        let pts = random_points(&mut rng, 40);
        let (q, norm) = normalize(&model, &pts).unwrap();
        let back = denormalize(&q, &norm);
        for (a, b) in back.iter().zip(&pts) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-9);
            }
        }
    }
}

#[test]
fn code_is_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = Model::new(ModelConfig { code_len: 16, ..Default::default() }, 7).unwrap();
    for _ in 0..5 {
        let pts = random_points(&mut rng, 32);
        let mut shuffled = pts.clone();
        shuffled.shuffle(&mut rng);
        let a = encode(&model, [1, 1, 1], &pts).unwrap();
        let b = encode(&model, [1, 1, 1], &shuffled).unwrap();
        for (x, y) in a.code.iter().zip(&b.code) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
}

#[test]
fn translation_moves_only_the_centroid() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = Model::new(small_config(), 9).unwrap();
    let pts = random_points(&mut rng, 24);
    let shift = [0.125, -0.25, 0.5];
    let moved: Vec<Point> = pts.iter().map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]]).collect();
    let a = encode(&model, [1, 1, 1], &pts).unwrap();
    let b = encode(&model, [1, 1, 1], &moved).unwrap();
    for (x, y) in a.code.iter().zip(&b.code) {
        assert!((x - y).abs() <= 1e-10);
    }
    for k in 0..3 {
        assert!((b.norm.centroid[k] - a.norm.centroid[k] - shift[k]).abs() < 1e-12);
        assert!((a.norm.scale[k] - b.norm.scale[k]).abs() <= 1e-10);
    }
}

#[test]
fn congruent_voxels_share_codes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = ModelConfig { normalization: false, ..small_config() };
    let model = Model::new(cfg, 1).unwrap();
    let pts = random_points(&mut rng, 30);
    let a = encode(&model, [1, 1, 1], &pts).unwrap();
    let b = encode(&model, [-7, 3, 2], &pts).unwrap();
    assert_eq!(a.code, b.code);
}

#[test]
fn mean_aggregation_is_column_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = Model::new(small_config(), 2).unwrap();
    let pts = random_points(&mut rng, 17);
    let mut tape = Tape::new(&model.params);
    let (q, _) = normalize_on_tape(&model.config, &mut tape, &pts).unwrap();
    let gs = build_graph_set(&tape.value(q).to_points(), &model.config.ks).unwrap();
    let graphs: Vec<BranchGraph> = gs.graphs.iter().map(|g| BranchGraph::differentiable(&mut tape, g, q)).collect();
    let mut x = q;
    for (l, layer) in gin_layers(&model.config).iter().enumerate() {
        x = layer.forward(&mut tape, x, &graphs).unwrap();
        if l < 2 {
            x = tape.relu(x);
        }
    }
    let feats = tape.value(x).clone();
    let mut direct = vec![0.0; feats.cols()];
    for r in 0..feats.rows() {
        for (d, v) in direct.iter_mut().zip(feats.row(r)) {
            *d += v;
        }
    }
    let direct: Vec<f64> = direct.iter().map(|d| d / 17.0).collect();
    let code = encode(&model, [1, 1, 1], &pts).unwrap();
    assert_eq!(code.code, direct);
}

#[test]
fn zero_fc_decoder_emits_bias_point() {
    let mut model = Model::new(small_config(), 4).unwrap();
    for id in 0..model.params.len() {
        if model.params.name(id).starts_with("dec.fc") {
            model.params.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let last = model.params.id("dec.fc.l1.b").unwrap();
    for (k, v) in model.params.tensor_mut(last).data_mut().iter_mut().enumerate() {
        *v = [0.1, 0.2, 0.3][k % 3];
    }
    let code = VoxelCode {
        voxel_index: [1, 1, 1],
        n: 5,
        code: vec![0.3; 8],
        norm: NormalizationParams { centroid: [0.5; 3], scale: [2.0, 1.0, 1.0], rot6: NormalizationParams::IDENTITY_ROT6 },
    };
    let out = decode(&model, &code).unwrap();
    assert_eq!(out.len(), 16);
    for p in out {
        assert!((p[0] - 0.7).abs() < 1e-15 && (p[1] - 0.7).abs() < 1e-15 && (p[2] - 0.8).abs() < 1e-15);
    }
}

#[test]
fn folding_output_count_is_grid_size() {
    let cfg = ModelConfig { decoder: DecoderKind::Folding, grid_side: 5, ..small_config() };
    let model = Model::new(cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for n in [3, 40] {
        let c = encode(&model, [1, 1, 1], &random_points(&mut rng, n)).unwrap();
        assert_eq!(decode(&model, &c).unwrap().len(), 25);
    }
    let g = folding_grid(3);
    assert_eq!(g.row(0), &[0.0, 0.0]);
    assert_eq!(g.row(8), &[1.0, 1.0]);
}

#[test]
fn pointnet_single_point_code() {
    let cfg = ModelConfig { encoder: EncoderKind::PointNet, normalization: false, ..small_config() };
    let model = Model::new(cfg, 6).unwrap();
    let p = [[0.25, 0.5, 0.75]];
    let c = encode(&model, [1, 1, 1], &p).unwrap();
    let mut tape = Tape::new(&model.params);
    let x = tape.input(Tensor::from_points(&[[0.0; 3]]));
    let y = pointnet(&model.config).forward(&mut tape, x).unwrap();
    assert_eq!(c.code, tape.value(y).data());
}

#[test]
fn roundtrip_cardinalities() {
    let model = Model::new(small_config(), 1).unwrap();
    let spec = VoxelSpec::new([1.0, 1.0, 10.0], [0.0; 3]).unwrap();
    let empty = codec_roundtrip(&model, &PointCloud::new(vec![]), &spec, 2).unwrap();
    assert!(empty.reconstruction.is_empty());
    assert!(empty.stream.entries.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut pts: Vec<Point> = (0..30).map(|_| [rng.gen(), rng.gen(), rng.gen::<f64>() * 10.0]).collect();
    let one = codec_roundtrip(&model, &PointCloud::new(pts.clone()), &spec, 2).unwrap();
    assert_eq!(one.stream.coded_count(), 1);
    assert_eq!(one.reconstruction.len(), 16);

    pts.push([5.5, 0.5, 0.5]);
    let two = codec_roundtrip(&model, &PointCloud::new(pts), &spec, 2).unwrap();
    assert_eq!(two.stream.entries.len(), 2);
    assert_eq!(two.stream.bypass_point_count(), 1);
    assert_eq!(two.reconstruction.len(), 17);
    assert_eq!(two.reconstruction.points[16], [5.5, 0.5, 0.5]);
}

#[test]
fn small_pipeline_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cfg = ModelConfig {
        code_len: 4,
        ks: vec![1, 3],
        gin_widths: vec![5, 6],
        branch_widths: vec![4, 3],
        norm_widths: vec![5, 6],
        fc_widths: vec![7],
        decoder_points: 5,
        ..Default::default()
    };
    let model = Model::new(cfg.clone(), 3).unwrap();
    let pts = random_points(&mut rng, 6);
    let target = Rc::new(Tensor::from_points(&pts));
    let report = grad_check(&model.params, |t| voxel_loss(&cfg, t, &pts, target.clone()), 1e-6).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
    assert!(report.checked > report.excluded);

    let fold = ModelConfig { decoder: DecoderKind::Folding, grid_side: 3, fold_widths: vec![4], ..cfg };
    let model = Model::new(fold.clone(), 4).unwrap();
    let report = grad_check(&model.params, |t| voxel_loss(&fold, t, &pts, target.clone()), 1e-6).unwrap();
    assert!(report.max_rel_error <= 1e-5, "{report:?}");
}

#[test]
fn from_parts_checks_shapes() {
    let model = Model::new(small_config(), 1).unwrap();
    assert!(Model::from_parts(small_config(), model.params.clone()).is_ok());
    let other = ModelConfig { code_len: 9, ..small_config() };
    assert!(Model::from_parts(other, model.params).is_err());
}
