//! Training over a pooled corpus of voxels, and sweep-level evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Grads, Tape, Tensor};
use crate::error::{PctError, Result};
use crate::metrics::{comment_block, compression_ratio, MetricsReport, RatioAccounting};
use crate::model::{decode_voxels, encode_cloud, voxel_loss, Model, ModelConfig};
use crate::pc_io::{load_cloud, DatasetSplit, Point, PointCloud};
use crate::voxelize::{partition, VoxelIndex, VoxelSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Voxels per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Taken from the run seed, not from the `[train]` section.
    #[serde(skip)]
    pub seed: u64,
    /// Voxels with fewer points are stored raw instead of encoded.
    pub n_min: usize,
    pub accounting: RatioAccounting,
    /// Record elapsed seconds in the training log; when off the column is 0
    /// so logs of identical runs are byte-identical.
    pub wall_clock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            n_min: 2,
            accounting: RatioAccounting::Full,
            wall_clock: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PctError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(PctError::Config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One training or held-out voxel in unit-cube coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusVoxel {
    pub sweep: usize,
    pub voxel_index: VoxelIndex,
    pub points: Vec<Point>,
}

impl CorpusVoxel {
    /// Ordering key used for every reduction over voxels.
    pub fn key(&self) -> (usize, VoxelIndex) {
        (self.sweep, self.voxel_index)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Vec<CorpusVoxel>,
    pub test: Vec<CorpusVoxel>,
    /// Voxels left out because they hold fewer than `n_min` points.
    pub bypassed: usize,
}

fn voxels_of(clouds: &[PointCloud], sizes: [f64; 3], n_min: usize, bypassed: &mut usize) -> Result<Vec<CorpusVoxel>> {
    let mut out = Vec::new();
    for (sweep, cloud) in clouds.iter().enumerate() {
        if cloud.is_empty() {
            continue;
        }
        let spec = VoxelSpec::anchored(sizes, cloud)?;
        for (index, members) in partition(cloud, &spec)?.voxels {
            if members.points.len() < n_min.max(1) {
                *bypassed += 1;
                continue;
            }
            out.push(CorpusVoxel {
                sweep,
                voxel_index: index,
                points: members.points.iter().map(|p| spec.to_local_point(index, p)).collect(),
            });
        }
    }
    Ok(out)
}

/// Pools every voxel with at least `n_min` points, sweep by sweep in voxel
/// index order.
pub fn build_corpus(train: &[PointCloud], test: &[PointCloud], sizes: [f64; 3], n_min: usize) -> Result<Corpus> {
    let mut bypassed = 0;
    let train = voxels_of(train, sizes, n_min, &mut bypassed)?;
    let test = voxels_of(test, sizes, n_min, &mut bypassed)?;
    if train.is_empty() {
        return Err(PctError::Empty("training corpus holds no voxel with enough points".into()));
    }
    Ok(Corpus { train, test, bypassed })
}

pub fn load_clouds(paths: &[impl AsRef<Path>]) -> Result<Vec<PointCloud>> {
    paths.iter().map(load_cloud).collect()
}

pub fn load_split(split: &DatasetSplit) -> Result<(Vec<PointCloud>, Vec<PointCloud>)> {
    Ok((load_clouds(&split.train_paths)?, load_clouds(&split.test_paths)?))
}

fn voxel_pass(model: &Model, voxel: &CorpusVoxel, with_grads: bool) -> Result<(f64, Option<Grads>)> {
    let mut tape = Tape::new(&model.params);
    let target = Rc::new(Tensor::from_points(&voxel.points));
    let loss = voxel_loss(&model.config, &mut tape, &voxel.points, target)?;
    let value = tape.value(loss).data()[0];
    let grads = with_grads.then(|| tape.backward(loss));
    Ok((value, grads))
}

/// Mean per-voxel Chamfer loss, summed in corpus order.
pub fn mean_cd(model: &Model, voxels: &[CorpusVoxel]) -> Result<f64> {
    if voxels.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = voxels
        .par_iter()
        .map(|v| voxel_pass(model, v, false).map(|(l, _)| l))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / voxels.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_cd: f64,
    pub test_cd: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub initial_train_cd: f64,
    pub initial_test_cd: f64,
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_cd,test_cd,seconds";

    pub fn final_test_cd(&self) -> f64 {
        self.rows.last().map_or(self.initial_test_cd, |r| r.test_cd)
    }

    /// Provenance and the initial losses as comments, then one row per epoch.
    pub fn to_csv(&self, provenance: &str) -> String {
        let mut out = comment_block(provenance);
        let _ = writeln!(
            out,
            "# initial train_cd={:e} test_cd={:e}",
            self.initial_train_cd, self.initial_test_cd
        );
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{:e},{:e},{:.3}", r.epoch, r.train_cd, r.test_cd, r.seconds);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: Model,
    /// Parameters with the lowest held-out CD seen, the initial ones included.
    pub best: Model,
    pub best_epoch: usize,
    pub log: TrainLog,
}

/// Minimizes the mean per-voxel Chamfer loss with Adam. Each batch is
/// processed in ascending corpus order whatever the shuffle, so the result
/// does not depend on thread count.
pub fn train(corpus: &Corpus, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(corpus, model_config, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    corpus: &Corpus,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(PctError::Empty("training corpus is empty".into()));
    }
    let start = Instant::now();
    let mut model = Model::new(model_config.clone(), config.seed)?;
    let adam = AdamConfig { lr: config.learning_rate, ..Default::default() };
    let mut state = AdamState::new(&model.params, adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);

    let initial_train_cd = mean_cd(&model, &corpus.train)?;
    let initial_test_cd = mean_cd(&model, &corpus.test)?;
    let score = |test: f64, train: f64| if corpus.test.is_empty() { train } else { test };
    let mut best = (score(initial_test_cd, initial_train_cd), model.clone(), 0);
    let mut rows = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..corpus.train.len()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut batch = chunk.to_vec();
            batch.sort_unstable_by_key(|&i| corpus.train[i].key());
            let results = batch
                .par_iter()
                .map(|&i| voxel_pass(&model, &corpus.train[i], true))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = model.params.zeros_like();
            let mut loss = 0.0;
            for (l, g) in &results {
                loss += l;
                grads.add_assign(g.as_ref().expect("requested"));
            }
            if !loss.is_finite() {
                return Err(PctError::Numeric(format!("non-finite loss at epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut model.params, &grads, &mut state);
        }
        let row = EpochRow {
            epoch,
            train_cd: epoch_loss / corpus.train.len() as f64,
            test_cd: mean_cd(&model, &corpus.test)?,
            seconds: if config.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        let s = score(row.test_cd, row.train_cd);
        if s < best.0 {
            best = (s, model.clone(), epoch);
        }
        on_epoch(&row);
        rows.push(row);
    }
    Ok(TrainOutcome {
        model,
        best: best.1,
        best_epoch: best.2,
        log: TrainLog { initial_train_cd, initial_test_cd, rows },
    })
}

#[derive(Serialize, Deserialize)]
struct Echo {
    model: ModelConfig,
}

/// Writes a checkpoint whose configuration echo is `provenance` (as
/// comments) followed by the model's architecture.
pub fn save_model(path: impl AsRef<Path>, model: &Model, provenance: &str) -> Result<()> {
    let arch = toml::to_string(&Echo { model: model.config.clone() })
        .map_err(|e| PctError::Config(format!("cannot serialize model config: {e}")))?;
    save_checkpoint(path, &model.params, &(comment_block(provenance) + &arch))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let (params, echo) = load_checkpoint(path)?;
    let parsed: Echo = toml::from_str(&echo)
        .map_err(|e| PctError::Checkpoint(format!("{}: unreadable configuration echo: {e}", path.display())))?;
    Model::from_parts(parsed.model, params)
}

/// Per-sweep output of a full encode/decode pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub report: MetricsReport,
    pub reconstruction: PointCloud,
}

/// Round-trips one sweep through the codec and measures it.
pub fn evaluate_sweep(
    model: &Model,
    cloud: &PointCloud,
    sizes: [f64; 3],
    config: &TrainConfig,
    method: &str,
) -> Result<SweepResult> {
    let spec = VoxelSpec::anchored(sizes, cloud)?;
    let stream = encode_cloud(model, cloud, &spec, config.n_min)?;
    let per_voxel: BTreeMap<VoxelIndex, Vec<Point>> = decode_voxels(model, &stream)?;
    let reconstruction = PointCloud::new(per_voxel.values().flatten().copied().collect());
    let ratio = compression_ratio(&stream, cloud.len(), config.accounting)?;
    let report = MetricsReport::measure(
        method,
        model.config.code_len,
        ratio,
        cloud,
        &reconstruction,
        Some(&per_voxel),
        &spec,
        config.seed,
    )?;
    Ok(SweepResult { report, reconstruction })
}

/// One report per sweep, in input order.
pub fn evaluate(
    model: &Model,
    sweeps: &[PointCloud],
    sizes: [f64; 3],
    config: &TrainConfig,
    method: &str,
) -> Result<Vec<MetricsReport>> {
    sweeps
        .iter()
        .map(|c| evaluate_sweep(model, c, sizes, config, method).map(|r| r.report))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synthetic_sweeps, SynthConfig};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            code_len: 4,
            ks: vec![1, 4],
            gin_widths: vec![8, 8],
            branch_widths: vec![4, 4],
            norm_widths: vec![8, 8],
            fc_widths: vec![16],
            decoder_points: 16,
            ..Default::default()
        }
    }

    fn tiny_corpus() -> Corpus {
        let cfg = SynthConfig { sweeps: 3, voxels_per_sweep: 4, min_points: 12, max_points: 20, seed: 1, ..Default::default() };
        let sweeps = synthetic_sweeps(&cfg, [1.0, 1.0, 10.0]).unwrap();
        build_corpus(&sweeps[..2], &sweeps[2..], [1.0, 1.0, 10.0], 2).unwrap()
    }

    #[test]
    fn corpus_counts_and_bypass() {
        let c = tiny_corpus();
        assert_eq!((c.train.len(), c.test.len(), c.bypassed), (8, 4, 0));
        let lone = PointCloud::new(vec![[0.5, 0.5, 0.5], [3.5, 0.5, 0.5], [3.6, 0.5, 0.5]]);
        let c = build_corpus(&[lone.clone()], &[], [1.0; 3], 2).unwrap();
        assert_eq!((c.train.len(), c.bypassed), (1, 1));
        assert!(build_corpus(&[lone], &[], [1.0; 3], 3).is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig { epochs: 1, batch_size: 3, learning_rate: 0.0, wall_clock: false, ..Default::default() };
        let out = train(&corpus, &tiny_model(), &cfg).unwrap();
        let fresh = Model::new(tiny_model(), cfg.seed).unwrap();
        assert_eq!(out.model.params, fresh.params);
        assert_eq!(out.log.rows[0].test_cd, out.log.initial_test_cd);
        assert_eq!(out.log.rows[0].train_cd, out.log.initial_train_cd);
    }

    #[test]
    fn full_batch_step_ignores_corpus_order() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig { epochs: 1, batch_size: 100, wall_clock: false, ..Default::default() };
        let a = train(&corpus, &tiny_model(), &cfg).unwrap();
        let mut reversed = corpus.clone();
        reversed.train.reverse();
        let b = train(&reversed, &tiny_model(), &cfg).unwrap();
        assert_eq!(a.model.params, b.model.params);
        assert!((a.log.rows[0].train_cd - b.log.rows[0].train_cd).abs() <= 1e-12);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig { epochs: 3, batch_size: 3, learning_rate: 1e-2, wall_clock: false, ..Default::default() };
        let a = train(&corpus, &tiny_model(), &cfg).unwrap();
        let b = train(&corpus, &tiny_model(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.rows.len(), 3);
        let csv = a.log.to_csv("seed = 0");
        assert!(csv.contains("# initial train_cd="));
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 4);
    }

    #[test]
    fn checkpoint_round_trip_reproduces_metrics() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig { epochs: 1, batch_size: 4, wall_clock: false, ..Default::default() };
        let out = train(&corpus, &tiny_model(), &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pct1");
        save_model(&path, &out.model, "seed = 0").unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, out.model);
        let sweeps = synthetic_sweeps(&SynthConfig { sweeps: 1, voxels_per_sweep: 3, seed: 9, ..Default::default() }, [1.0, 1.0, 10.0]).unwrap();
        let a = evaluate(&out.model, &sweeps, [1.0, 1.0, 10.0], &cfg, "gin").unwrap();
        let b = evaluate(&back, &sweeps, [1.0, 1.0, 10.0], &cfg, "gin").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_bypass_model_is_lossless() {
        let sweeps = synthetic_sweeps(&SynthConfig { sweeps: 1, voxels_per_sweep: 3, seed: 4, ..Default::default() }, [1.0, 1.0, 10.0]).unwrap();
        let model = Model::new(tiny_model(), 0).unwrap();
        let cfg = TrainConfig { n_min: usize::MAX, ..Default::default() };
        let r = &evaluate(&model, &sweeps, [1.0, 1.0, 10.0], &cfg, "gin").unwrap()[0];
        assert_eq!((r.ratio, r.cd, r.emd, r.mean, r.variance, r.mse), (1.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }
}
