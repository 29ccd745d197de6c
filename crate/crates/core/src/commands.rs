//! The `pct` command-line tool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::baselines::{g_random, octree_for_ratio, v_kmeans, v_random, BaselineMethod, Budget};
use crate::config::{stem, Overrides, RunConfig};
use crate::error::{PctError, Result};
use crate::metrics::{comment_block, metrics_csv, MetricsReport};
use crate::model::{decode_cloud, encode_cloud, load_stream, save_stream, Aggregation, DecoderKind, EncoderKind, ModelConfig};
use crate::pc_io::{load_cloud, save_xyz, PointCloud};
use crate::trainer::{build_corpus, evaluate_sweep, load_model, save_model, train_with, TrainConfig, TrainOutcome};
use crate::voxelize::{partition, VoxelSpec};

#[derive(Debug, Parser)]
#[command(name = "pct", version, about = "Voxel-wise learned point cloud codec")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long = "code-len", global = true)]
    pub code_len: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes model.pct1, best.pct1 and train_log.csv.
    Train,
    /// Encode sweeps into code streams (.pctc).
    Encode { paths: Vec<PathBuf> },
    /// Decode code streams into .xyz clouds.
    Decode { paths: Vec<PathBuf> },
    /// Round-trip sweeps (default: the test split) and report metrics.
    Eval { paths: Vec<PathBuf> },
    /// Rate-distortion table over code lengths and methods.
    RdCurve {
        /// Train missing checkpoints instead of failing.
        #[arg(long)]
        train: bool,
    },
    /// Train and evaluate the seven ablation rows.
    Ablate,
    /// Run a spatial-domain baseline.
    Baseline {
        #[arg(long)]
        method: String,
        #[arg(long)]
        ratio: Option<f64>,
        paths: Vec<PathBuf>,
    },
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli, ratio: Option<f64>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => return Err(PctError::Config("--config <path> is required".into())),
    };
    cfg.apply(&Overrides { seed: cli.seed, out: cli.out.clone(), code_len: cli.code_len, ratio });
    cfg.validate()?;
    fs::create_dir_all(&cfg.out).map_err(|e| PctError::io(&cfg.out, e))?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train(&resolve(cli, None)?),
        Command::Encode { paths } => cmd_encode(&resolve(cli, None)?, paths),
        Command::Decode { paths } => cmd_decode(&resolve(cli, None)?, paths),
        Command::Eval { paths } => cmd_eval(&resolve(cli, None)?, paths),
        Command::RdCurve { train } => cmd_rd_curve(&resolve(cli, None)?, *train),
        Command::Ablate => cmd_ablate(&resolve(cli, None)?),
        Command::Baseline { method, ratio, paths } => {
            let m = BaselineMethod::parse(method)?;
            cmd_baseline(&resolve(cli, *ratio)?, m, paths)
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PctError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| PctError::io(path, e))
}

fn save_checkpoint(path: &Path, model: &crate::model::Model, provenance: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PctError::io(dir, e))?;
    }
    save_model(path, model, provenance)
}

fn train_model(cfg: &RunConfig, model: &ModelConfig, label: &str) -> Result<TrainOutcome> {
    let data = cfg.load_data()?;
    let train = cfg.train_config();
    let corpus = build_corpus(&data.train_clouds(), &data.test_clouds(), model.voxel_size, train.n_min)?;
    eprintln!(
        "{label}: {} training voxels, {} held-out, {} bypassed",
        corpus.train.len(),
        corpus.test.len(),
        corpus.bypassed
    );
    train_with(&corpus, model, &train, |r| {
        eprintln!("{label} epoch {} train_cd {:.6e} test_cd {:.6e}", r.epoch, r.train_cd, r.test_cd)
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = train_model(cfg, &cfg.model, "train")?;
    let prov = cfg.provenance();
    save_model(cfg.out.join("model.pct1"), &out.model, &prov)?;
    save_model(cfg.out.join("best.pct1"), &out.best, &prov)?;
    write(&cfg.out.join("train_log.csv"), out.log.to_csv(&prov))?;
    println!(
        "initial test_cd {:e}, final test_cd {:e}, best epoch {}",
        out.log.initial_test_cd,
        out.log.final_test_cd(),
        out.best_epoch
    );
    Ok(())
}

fn method_name(model: &ModelConfig) -> &'static str {
    match model.encoder {
        EncoderKind::Gin => "gin",
        EncoderKind::PointNet => "pointnet",
    }
}

/// Named input clouds: the given files, or the test split.
fn inputs(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<(String, PointCloud)>> {
    if paths.is_empty() {
        return Ok(cfg.load_data()?.test);
    }
    paths.iter().map(|p| Ok((stem(p), load_cloud(p)?))).collect()
}

pub fn cmd_encode(cfg: &RunConfig, paths: &[PathBuf]) -> Result<()> {
    let model = load_model(cfg.checkpoint_path())?;
    let train = cfg.train_config();
    for (name, cloud) in inputs(cfg, paths)? {
        let spec = VoxelSpec::anchored(model.config.voxel_size, &cloud)?;
        let stream = encode_cloud(&model, &cloud, &spec, train.n_min)?;
        let path = cfg.out.join(format!("{name}.pctc"));
        save_stream(&path, &stream)?;
        let r = evaluate_sweep(&model, &cloud, model.config.voxel_size, &train, method_name(&model.config))?;
        println!("{}: {} voxels -> {}", name, stream.entries.len(), path.display());
        println!("{}", MetricsReport::CSV_HEADER);
        println!("{}", r.report.csv_row());
    }
    Ok(())
}

pub fn cmd_decode(cfg: &RunConfig, paths: &[PathBuf]) -> Result<()> {
    if paths.is_empty() {
        return Err(PctError::Config("decode needs at least one .pctc file".into()));
    }
    let model = load_model(cfg.checkpoint_path())?;
    for p in paths {
        let stream = load_stream(p)?;
        let cloud = decode_cloud(&model, &stream)?;
        let path = cfg.out.join(format!("{}.xyz", stem(p)));
        save_xyz(&cloud, &path)?;
        println!("{}: {} points -> {}", p.display(), cloud.len(), path.display());
    }
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, paths: &[PathBuf]) -> Result<()> {
    let model = load_model(cfg.checkpoint_path())?;
    let train = cfg.train_config();
    let method = method_name(&model.config);
    let mut reports = Vec::new();
    for (name, cloud) in inputs(cfg, paths)? {
        let r = evaluate_sweep(&model, &cloud, model.config.voxel_size, &train, method)?;
        save_xyz(&r.reconstruction, cfg.out.join(format!("{name}.rec.xyz")))?;
        reports.push(r.report);
    }
    let mean = MetricsReport::aggregate(method, &reports)?;
    let prov = cfg.provenance();
    write(&cfg.out.join("eval_sweeps.csv"), metrics_csv(&prov, &reports))?;
    write(&cfg.out.join("eval.csv"), metrics_csv(&prov, std::slice::from_ref(&mean)))?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", mean.csv_row());
    Ok(())
}

/// Reconstruction of `cloud` by a baseline at `ratio`, with the realized ratio.
pub fn run_baseline(method: BaselineMethod, cloud: &PointCloud, spec: &VoxelSpec, ratio: f64, seed: u64) -> Result<(PointCloud, f64)> {
    let budget = Budget::new(ratio.min(1.0))?;
    let rec = match method {
        BaselineMethod::GRandom => g_random(cloud, budget, seed)?,
        BaselineMethod::VRandom => v_random(&partition(cloud, spec)?, budget, seed),
        BaselineMethod::VKmeans => v_kmeans(&partition(cloud, spec)?, budget, seed).cloud,
        BaselineMethod::Octree => octree_for_ratio(cloud, ratio)?.cloud,
    };
    let realized = rec.len() as f64 / cloud.len() as f64;
    Ok((rec, realized))
}

fn baseline_report(
    method: BaselineMethod,
    code_len: usize,
    cloud: &PointCloud,
    sizes: [f64; 3],
    ratio: f64,
    seed: u64,
) -> Result<(MetricsReport, PointCloud)> {
    let spec = VoxelSpec::anchored(sizes, cloud)?;
    let (rec, realized) = run_baseline(method, cloud, &spec, ratio, seed)?;
    let r = MetricsReport::measure(method.name(), code_len, realized, cloud, &rec, None, &spec, seed)?;
    Ok((r, rec))
}

pub fn cmd_baseline(cfg: &RunConfig, method: BaselineMethod, paths: &[PathBuf]) -> Result<()> {
    let mut reports = Vec::new();
    for (name, cloud) in inputs(cfg, paths)? {
        let (r, rec) = baseline_report(method, 0, &cloud, cfg.model.voxel_size, cfg.ratio, cfg.seed)?;
        save_xyz(&rec, cfg.out.join(format!("{name}.{}.xyz", method.name())))?;
        reports.push(r);
    }
    let mean = MetricsReport::aggregate(method.name(), &reports)?;
    write(
        &cfg.out.join(format!("baseline_{}.csv", method.name())),
        metrics_csv(&cfg.provenance(), &reports),
    )?;
    println!("{}", MetricsReport::CSV_HEADER);
    println!("{}", mean.csv_row());
    Ok(())
}

pub const RD_HEADER: &str = "method,code_len,ratio,emd,cd,mean,variance,mse,log10_mse";

fn rd_row(r: &MetricsReport) -> String {
    format!("{},{:e}", r.csv_row(), r.mse.log10())
}

/// Trained model for one rate-distortion operating point, from
/// `<out>/rd/<name>_l<code_len>.pct1` or freshly trained.
fn rd_model(cfg: &RunConfig, model: &ModelConfig, train: bool) -> Result<crate::model::Model> {
    let path = cfg.out.join("rd").join(format!("{}_l{}.pct1", method_name(model), model.code_len));
    if path.exists() || !train {
        return load_model(&path);
    }
    let label = format!("{}_l{}", method_name(model), model.code_len);
    let out = train_model(cfg, model, &label)?;
    save_checkpoint(&path, &out.model, &cfg.provenance())?;
    Ok(out.model)
}

pub fn cmd_rd_curve(cfg: &RunConfig, train: bool) -> Result<()> {
    let data = cfg.load_data()?;
    let tc = cfg.train_config();
    let sizes = cfg.model.voxel_size;
    let mut csv = comment_block(&cfg.provenance());
    csv.push_str(RD_HEADER);
    csv.push('\n');
    for &l in &cfg.code_lengths {
        let gin = ModelConfig { code_len: l, encoder: EncoderKind::Gin, ..cfg.model.clone() };
        let pointnet = ModelConfig { encoder: EncoderKind::PointNet, ..gin.clone() };
        let mut rows = Vec::new();
        let mut budgets = Vec::new();
        for mc in [&gin, &pointnet] {
            let model = rd_model(cfg, mc, train)?;
            let mut reports = Vec::new();
            for (_, cloud) in &data.test {
                reports.push(evaluate_sweep(&model, cloud, sizes, &tc, method_name(mc))?.report);
            }
            if mc.encoder == EncoderKind::Gin {
                budgets = reports.iter().map(|r| r.ratio).collect();
            }
            rows.push(MetricsReport::aggregate(method_name(mc), &reports)?);
        }
        for method in BaselineMethod::ALL {
            let mut reports = Vec::new();
            for ((_, cloud), &ratio) in data.test.iter().zip(&budgets) {
                reports.push(baseline_report(method, l, cloud, sizes, ratio, cfg.seed)?.0);
            }
            rows.push(MetricsReport::aggregate(method.name(), &reports)?);
        }
        for r in &rows {
            let _ = writeln!(csv, "{}", rd_row(r));
            println!("{}", rd_row(r));
        }
    }
    write(&cfg.out.join("rd_curve.csv"), csv)
}

/// One row of the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub inception: bool,
    pub mean_agg: bool,
    pub norm: bool,
    pub decoder: DecoderKind,
    pub model: ModelConfig,
}

/// The seven encoder/decoder combinations, in table order. Without
/// inception a single `K = 1` graph is used; without mean aggregation, max.
pub fn ablation_rows(base: &ModelConfig) -> Vec<AblationRow> {
    use DecoderKind::{Folding, FullyConnected as Fc};
    let grid = [
        (false, false, false, Fc),
        (true, false, false, Fc),
        (true, false, false, Folding),
        (true, true, false, Fc),
        (true, true, false, Folding),
        (true, true, true, Fc),
        (true, true, true, Folding),
    ];
    grid.into_iter()
        .map(|(inception, mean_agg, norm, decoder)| AblationRow {
            inception,
            mean_agg,
            norm,
            decoder,
            model: ModelConfig {
                encoder: EncoderKind::Gin,
                ks: if inception { base.ks.clone() } else { vec![1] },
                aggregation: if mean_agg { Aggregation::Mean } else { Aggregation::Max },
                normalization: norm,
                decoder,
                ..base.clone()
            },
        })
        .collect()
}

pub const ABLATION_HEADER: &str = "row,inception,mean_agg,norm,decoder,emd,cd,mean,variance,mse";

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let data = cfg.load_data()?;
    let tc: TrainConfig = cfg.train_config();
    let mut csv = comment_block(&cfg.provenance());
    csv.push_str(ABLATION_HEADER);
    csv.push('\n');
    for (i, row) in ablation_rows(&cfg.model).iter().enumerate() {
        let out = train_model(cfg, &row.model, &format!("row{}", i + 1))?;
        save_checkpoint(&cfg.out.join("ablation").join(format!("row{}.pct1", i + 1)), &out.model, &cfg.provenance())?;
        let mut reports = Vec::new();
        for (_, cloud) in &data.test {
            reports.push(evaluate_sweep(&out.model, cloud, cfg.model.voxel_size, &tc, "gin")?.report);
        }
        let m = MetricsReport::aggregate("gin", &reports)?;
        let decoder = match row.decoder {
            DecoderKind::FullyConnected => "fc",
            DecoderKind::Folding => "folding",
        };
        let line = format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e},{:e}",
            i + 1,
            row.inception,
            row.mean_agg,
            row.norm,
            decoder,
            m.emd,
            m.cd,
            m.mean,
            m.variance,
            m.mse
        );
        println!("{line}");
        let _ = writeln!(csv, "{line}");
    }
    write(&cfg.out.join("ablation.csv"), csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_matches_table() {
        let rows = ablation_rows(&ModelConfig::default());
        assert_eq!(rows.len(), 7);
        let flags: Vec<_> = rows.iter().map(|r| (r.inception, r.mean_agg, r.norm, r.decoder)).collect();
        use DecoderKind::*;
        assert_eq!(
            flags,
            vec![
                (false, false, false, FullyConnected),
                (true, false, false, FullyConnected),
                (true, false, false, Folding),
                (true, true, false, FullyConnected),
                (true, true, false, Folding),
                (true, true, true, FullyConnected),
                (true, true, true, Folding),
            ]
        );
        assert_eq!(rows[0].model.ks, vec![1]);
        assert_eq!(rows[1].model.ks, vec![1, 4, 8, 16]);
        assert_eq!(rows[0].model.aggregation, Aggregation::Max);
    }

    #[test]
    fn unknown_method_is_a_config_error() {
        let code = run(["pct", "baseline", "--method", "dgcnn", "--config", "x.toml"]);
        assert_eq!(code, 2);
    }
}
