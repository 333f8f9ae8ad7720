//! `gsreloc`: synthetic data generation, training stages, localization and evaluation.

mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use config::{flag, layered};
use gsreloc::detector::{load_detector, save_detector};
use gsreloc::eval::dataset::load_poses;
use gsreloc::eval::metrics::{write_metrics_csv, write_trajectory_csv};
use gsreloc::eval::{
    compute_metrics, default_thresholds, load_dataset, load_results, save_dataset, save_results, synth_scene,
    SyntheticDataset, SyntheticSceneSpec, Threshold,
};
use gsreloc::features::{write_loss_history, TrainConfig};
use gsreloc::landmarks::{load_landmarks, save_landmarks};
use gsreloc::pipeline::{
    localize_all, query_images, score_views, select_landmarks, train_detector_on, train_features, DetectorTrainConfig,
    LandmarkConfig, LocalizeConfig, Model,
};
use gsreloc::scene::{load_scene, save_scene, FeatureGaussianScene};

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn new(kind: &'static str, message: impl Into<String>) -> Self {
        Self { kind, message: message.into() }
    }
    pub fn usage(m: impl Into<String>) -> Self {
        Self::new("usage", m)
    }
    pub fn config(m: impl Into<String>) -> Self {
        Self::new("config", m)
    }
    pub fn input(m: impl Into<String>) -> Self {
        Self::new("input", m)
    }
    pub fn internal(m: impl Into<String>) -> Self {
        Self::new("internal", m)
    }
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Self::new("io", format!("{}: {e}", path.display()))
    }
}

#[derive(Parser)]
#[command(name = "gsreloc", version, about = "Visual relocalization against feature Gaussian scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and rendered views into a dataset directory.
    Synth(SynthArgs),
    /// Distill extractor features of the training views into the scene.
    TrainFeatures(TrainFeaturesArgs),
    /// Select landmark Gaussians by significance and kNN competition.
    SampleLandmarks(SampleArgs),
    /// Train the landmark detector on the training views.
    TrainDetector(DetectorArgs),
    /// Localize the query views.
    Localize(LocalizeArgs),
    /// Compare results against ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct Layers {
    /// JSON file with config keys for this subcommand.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (dotted path), e.g. `--set refine.temperature=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
}

impl DataArg {
    fn or(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data.join(name))
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Scene spec JSON (same keys as --config).
    #[arg(long, value_name = "FILE")]
    spec: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    /// terrain | clustered | uniform
    #[arg(long)]
    profile: Option<String>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFeaturesArgs {
    #[command(flatten)]
    data: DataArg,
    /// Scene to start from [default: DIR/scene.ply].
    #[arg(long)]
    scene: Option<PathBuf>,
    /// Trained scene [default: DIR/scene.ply].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss history CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_views: Option<usize>,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    data: DataArg,
    /// Trained scene [default: DIR/scene.ply].
    #[arg(long)]
    scene: Option<PathBuf>,
    /// [default: DIR/landmarks.lmk]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    /// Candidate pool size Q.
    #[arg(long, value_name = "Q")]
    landmarks: Option<usize>,
    /// Neighbors k in the competition.
    #[arg(long, value_name = "K")]
    knn: Option<usize>,
    /// knn | random
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DetectorArgs {
    #[command(flatten)]
    data: DataArg,
    /// [default: DIR/scene.ply]
    #[arg(long)]
    scene: Option<PathBuf>,
    /// [default: DIR/landmarks.lmk]
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// [default: DIR/detector.det]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss history CSV.
    #[arg(long)]
    losses: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_cells: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    label_radius: Option<usize>,
    #[arg(long)]
    extractor: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    data: DataArg,
    /// [default: DIR/scene.ply]
    #[arg(long)]
    scene: Option<PathBuf>,
    /// [default: DIR/landmarks.lmk]
    #[arg(long)]
    landmarks: Option<PathBuf>,
    /// [default: DIR/detector.det]
    #[arg(long)]
    detector: Option<PathBuf>,
    /// [default: DIR/results.json]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    /// Dense refinement iterations [default: 3].
    #[arg(long)]
    iterations: Option<usize>,
    /// Detector probability threshold.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    nms_radius: Option<usize>,
    #[arg(long)]
    max_keypoints: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    /// RANSAC inlier threshold in pixels.
    #[arg(long)]
    tau_px: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
    /// Matching temperature.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    p_min: Option<f64>,
    /// Consistency gate in degrees.
    #[arg(long)]
    tau_ang: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArg,
    /// [default: DIR/results.json]
    #[arg(long)]
    results: Option<PathBuf>,
    /// Directory for metrics.json, metrics.csv and trajectory.csv [default: DIR].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[command(flatten)]
    layers: Layers,
    /// Scene extent for the scaled thresholds [default: diagonal of DIR/scene.ply].
    #[arg(long)]
    extent: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct EvaluateConfig {
    extent: Option<f64>,
    /// Replaces the default threshold list.
    thresholds: Option<Vec<Threshold>>,
}

fn dataset(dir: &Path, with_scene: bool) -> Result<SyntheticDataset, CliError> {
    load_dataset(dir, with_scene).map_err(|e| CliError::input(e.to_string()))
}

fn scene_at(path: &Path) -> Result<FeatureGaussianScene<f64>, CliError> {
    load_scene(path).map_err(|e| CliError::io(path, e))
}

fn require(ok: bool, m: impl FnOnce() -> String) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::input(m()))
    }
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn synth(a: &SynthArgs) -> Result<Value, CliError> {
    let file = a.spec.as_ref().or(a.layers.config.as_ref());
    if a.spec.is_some() && a.layers.config.is_some() {
        return Err(CliError::usage("give either --spec or --config"));
    }
    let spec: SyntheticSceneSpec = layered(
        file.map(PathBuf::as_path),
        &a.layers.set,
        vec![
            ("gaussian_count", flag(&a.gaussians)),
            ("view_count", flag(&a.views)),
            ("profile", flag(&a.profile)),
            ("train_fraction", flag(&a.train_fraction)),
            ("feature_dim", flag(&a.feature_dim)),
            ("seed", flag(&a.seed)),
        ],
    )?;
    let ds = synth_scene(&spec).map_err(|e| CliError::input(e.to_string()))?;
    save_dataset(&ds, &a.out).map_err(|e| CliError::input(e.to_string()))?;
    Ok(json!({
        "dataset": a.out,
        "gaussians": ds.scene.len(),
        "train_views": ds.split.train.len(),
        "query_views": ds.split.query.len(),
        "extent": ds.extent(),
    }))
}

fn train_features_cmd(a: &TrainFeaturesArgs) -> Result<Value, CliError> {
    let cfg: TrainConfig = layered(
        a.layers.config.as_deref(),
        &a.layers.set,
        vec![
            ("iterations", flag(&a.iterations)),
            ("learning_rate", flag(&a.lr)),
            ("batch_views", flag(&a.batch_views)),
            ("extractor", flag(&a.extractor)),
            ("seed", flag(&a.seed)),
        ],
    )?;
    let ds = dataset(&a.data.data, false)?;
    let scene = scene_at(&a.data.or(&a.scene, "scene.ply"))?;
    let train = ds.train_views();
    require(!train.is_empty(), || "dataset has no training views".into())?;
    let (trained, losses) = train_features(&scene, &ds.intrinsics, &train, &cfg).map_err(|e| CliError::input(e.to_string()))?;
    let out = a.data.or(&a.out, "scene.ply");
    save_scene(&trained, &out).map_err(|e| CliError::io(&out, e))?;
    if let Some(p) = &a.losses {
        write_file(p, |w| write_loss_history(&losses, w))?;
    }
    Ok(json!({
        "scene": out,
        "iterations": cfg.iterations,
        "initial_loss": losses.first().map(|r| r.total),
        "final_loss": losses.last().map(|r| r.total),
    }))
}

fn sample_cmd(a: &SampleArgs) -> Result<Value, CliError> {
    let cfg: LandmarkConfig = layered(
        a.layers.config.as_deref(),
        &a.layers.set,
        vec![
            ("q", flag(&a.landmarks)),
            ("k", flag(&a.knn)),
            ("sampler", flag(&a.sampler)),
            ("batch_size", flag(&a.batch_size)),
            ("extractor", flag(&a.extractor)),
            ("seed", flag(&a.seed)),
        ],
    )?;
    let ds = dataset(&a.data.data, false)?;
    let scene = scene_at(&a.data.or(&a.scene, "scene.ply"))?;
    let train = ds.train_views();
    require(!train.is_empty(), || "dataset has no training views".into())?;
    let err = |e: gsreloc::pipeline::PipelineError| CliError::input(e.to_string());
    let table = score_views(&scene, &ds.intrinsics, &train, &cfg).map_err(err)?;
    let set = select_landmarks(&scene, &table, &cfg).map_err(err)?;
    let out = a.data.or(&a.out, "landmarks.lmk");
    save_landmarks(&set, &out).map_err(|e| CliError::io(&out, e))?;
    Ok(json!({ "landmarks": out, "count": set.len(), "q": cfg.q, "k": cfg.k }))
}

fn detector_cmd(a: &DetectorArgs) -> Result<Value, CliError> {
    let cfg: DetectorTrainConfig = layered(
        a.layers.config.as_deref(),
        &a.layers.set,
        vec![
            ("train.iterations", flag(&a.iterations)),
            ("train.learning_rate", flag(&a.lr)),
            ("train.batch_cells", flag(&a.batch_cells)),
            ("train.hidden", flag(&a.hidden)),
            ("train.seed", flag(&a.seed)),
            ("label_radius", flag(&a.label_radius)),
            ("extractor", flag(&a.extractor)),
        ],
    )?;
    let ds = dataset(&a.data.data, false)?;
    let scene = scene_at(&a.data.or(&a.scene, "scene.ply"))?;
    let lpath = a.data.or(&a.landmarks, "landmarks.lmk");
    let lm = load_landmarks(&lpath).map_err(|e| CliError::io(&lpath, e))?;
    require(!lm.is_empty(), || format!("{}: no landmarks", lpath.display()))?;
    let train = ds.train_views();
    require(!train.is_empty(), || "dataset has no training views".into())?;
    let (det, losses) =
        train_detector_on(&scene, &ds.intrinsics, &train, &lm, &cfg).map_err(|e| CliError::input(e.to_string()))?;
    let out = a.data.or(&a.out, "detector.det");
    save_detector(&det, &out).map_err(|e| CliError::io(&out, e))?;
    if let Some(p) = &a.losses {
        write_file(p, |w| {
            writeln!(w, "iteration,loss")?;
            losses.iter().enumerate().try_for_each(|(i, l)| writeln!(w, "{i},{l}"))
        })?;
    }
    Ok(json!({ "detector": out, "iterations": cfg.train.iterations, "final_loss": losses.last() }))
}

fn localize_cmd(a: &LocalizeArgs) -> Result<Value, CliError> {
    let cfg: LocalizeConfig = layered(
        a.layers.config.as_deref(),
        &a.layers.set,
        vec![
            ("refine.iterations", flag(&a.iterations)),
            ("refine.temperature", flag(&a.temperature)),
            ("refine.p_min", flag(&a.p_min)),
            ("detector_tau", flag(&a.tau)),
            ("nms_radius", flag(&a.nms_radius)),
            ("max_keypoints", flag(&a.max_keypoints)),
            ("top_k", flag(&a.top_k)),
            ("tau_px", flag(&a.tau_px)),
            ("ransac_iters", flag(&a.ransac_iters)),
            ("tau_ang_deg", flag(&a.tau_ang)),
            ("seed", flag(&a.seed)),
        ],
    )?;
    require(cfg.refine.iterations >= 1, || "refine.iterations must be at least 1".into())?;
    let ds = dataset(&a.data.data, false)?;
    let scene = scene_at(&a.data.or(&a.scene, "scene.ply"))?;
    let lpath = a.data.or(&a.landmarks, "landmarks.lmk");
    let landmarks = load_landmarks(&lpath).map_err(|e| CliError::io(&lpath, e))?;
    let dpath = a.data.or(&a.detector, "detector.det");
    let detector = load_detector(&dpath).map_err(|e| CliError::io(&dpath, e))?;
    require(landmarks.features.iter().all(|f| f.len() == scene.feature_dim), || {
        format!("{}: landmark feature size differs from the scene's", lpath.display())
    })?;
    let queries = query_images(&ds);
    require(!queries.is_empty(), || "dataset has no query views".into())?;
    let model = Model {
        scene: &scene,
        landmarks: &landmarks,
        detector: &detector,
        intrinsics: &ds.intrinsics,
    };
    let t0 = Instant::now();
    let results = localize_all(&model, &queries, &cfg);
    let secs = t0.elapsed().as_secs_f64();
    let out = a.data.or(&a.out, "results.json");
    save_results(&results, &out).map_err(|e| CliError::input(e.to_string()))?;
    let reliable = results.iter().filter(|r| r.result.is_reliable()).count();
    Ok(json!({ "results": out, "queries": results.len(), "reliable": reliable, "seconds": secs }))
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<Value, CliError> {
    let cfg: EvaluateConfig = layered(a.layers.config.as_deref(), &a.layers.set, vec![("extent", flag(&a.extent))])?;
    let rpath = a.data.or(&a.results, "results.json");
    let results = load_results(&rpath).map_err(|e| CliError::input(e.to_string()))?;
    let gt = load_poses(&a.data.data).map_err(|e| CliError::input(e.to_string()))?;
    let thresholds = match cfg.thresholds {
        Some(t) => t,
        None => {
            let extent = match cfg.extent {
                Some(e) => e,
                None => scene_at(&a.data.data.join("scene.ply"))?.bounds().map_or(0.0, |b| b.size()),
            };
            require(extent > 0.0, || "scene extent must be positive; pass --extent".into())?;
            default_thresholds(extent)
        }
    };
    let outcomes: Vec<_> = results.iter().map(|r| r.outcome()).collect();
    let report = compute_metrics(&outcomes, &gt, &thresholds).map_err(|e| CliError::input(e.to_string()))?;
    let dir = a.out_dir.clone().unwrap_or_else(|| a.data.data.clone());
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let metrics = dir.join("metrics.json");
    write_file(&metrics, |w| serde_json::to_writer_pretty(&mut *w, &report).map_err(std::io::Error::other))?;
    write_file(&dir.join("metrics.csv"), |w| write_metrics_csv(&report, w))?;
    let traj = dir.join("trajectory.csv");
    let mut buf = Vec::new();
    write_trajectory_csv(&outcomes, &gt, &mut buf).map_err(|e| CliError::input(e.to_string()))?;
    std::fs::write(&traj, buf).map_err(|e| CliError::io(&traj, e))?;
    let recall: serde_json::Map<String, Value> = report
        .recall
        .iter()
        .map(|r| (r.label.clone(), json!({ "filtered": r.filtered, "unfiltered": r.unfiltered })))
        .collect();
    Ok(json!({
        "metrics": metrics,
        "queries": report.queries,
        "unreliable": report.unreliable,
        "median_ae_deg": report.median_ae_deg,
        "median_te": report.median_te,
        "translation_unit": report.translation_unit,
        "recall": recall,
    }))
}

fn run(cli: Cli) -> Result<Value, CliError> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::TrainFeatures(a) => train_features_cmd(a),
        Command::SampleLandmarks(a) => sample_cmd(a),
        Command::TrainDetector(a) => detector_cmd(a),
        Command::Localize(a) => localize_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("{}", json!({ "error": e.kind, "message": e.message }));
    ExitCode::from(if e.kind == "usage" { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            return fail(&CliError::usage(msg.trim_end()));
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
