//! End-to-end glue: training stages over a dataset and per-query localization.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dense::{refine_pose, LocalizationResult, RefineConfig, DEFAULT_TAU_ANG_DEG};
use crate::detector::{
    detect_keypoints, infer, make_labels, train_detector, DetectorConfig, DetectorError, DetectorParams, LabelMap,
    DEFAULT_MAX_KEYPOINTS, DEFAULT_NMS_RADIUS, DEFAULT_TAU,
};
use crate::eval::{QueryResult, SyntheticDataset, SyntheticView};
use crate::features::{extract_features, train_feature_field, DenseFeatureMap, FeatureError, LossRecord, TrainConfig, TrainView, TrainingTarget};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::RgbImage;
use crate::landmarks::{random_landmarks, sample_landmarks, score_scene, LandmarkError, LandmarkSet, ScoreView, SignificanceTable};
use crate::scene::FeatureGaussianScene;
use crate::sparse::{match_sparse, solve_pnp_ransac, PnPResult, DEFAULT_MAX_ITERS, DEFAULT_TAU_PX, DEFAULT_TOP_K};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("features: {0}")]
    Features(#[from] FeatureError),
    #[error("landmarks: {0}")]
    Landmarks(#[from] LandmarkError),
    #[error("detector: {0}")]
    Detector(#[from] DetectorError),
    #[error("{0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Knn,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    /// Candidate pool size before competition.
    pub q: usize,
    pub k: usize,
    pub batch_size: usize,
    pub extractor: String,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            q: 16_384,
            k: 16,
            batch_size: 1024,
            extractor: "grad16".into(),
            sampler: Sampler::Knn,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub extractor: String,
    pub label_radius: usize,
    pub train: DetectorConfig,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            extractor: "grad16".into(),
            label_radius: 1,
            train: DetectorConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalizeConfig {
    pub extractor: String,
    pub detector_tau: f64,
    pub nms_radius: usize,
    pub max_keypoints: usize,
    pub top_k: usize,
    pub tau_px: f64,
    pub ransac_iters: usize,
    pub seed: u64,
    pub tau_ang_deg: f64,
    pub refine: RefineConfig,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            extractor: "grad16".into(),
            detector_tau: DEFAULT_TAU,
            nms_radius: DEFAULT_NMS_RADIUS,
            max_keypoints: DEFAULT_MAX_KEYPOINTS,
            top_k: DEFAULT_TOP_K,
            tau_px: DEFAULT_TAU_PX,
            ransac_iters: DEFAULT_MAX_ITERS,
            seed: 0,
            tau_ang_deg: DEFAULT_TAU_ANG_DEG,
            refine: RefineConfig::default(),
        }
    }
}

/// Distills features of the training images into the scene.
pub fn train_features(
    scene: &FeatureGaussianScene<f64>,
    k: &CameraIntrinsics<f64>,
    views: &[&SyntheticView],
    cfg: &TrainConfig,
) -> Result<(FeatureGaussianScene<f64>, Vec<LossRecord>), PipelineError> {
    let tv: Vec<TrainView<f64>> = views
        .iter()
        .map(|v| TrainView {
            pose: v.pose,
            intrinsics: *k,
            target: TrainingTarget::Image(v.image.clone()),
        })
        .collect();
    Ok(train_feature_field(scene, &tv, cfg)?)
}

fn extract_all(images: &[&RgbImage<f64>], extractor: &str) -> Result<Vec<DenseFeatureMap<f64>>, PipelineError> {
    images
        .par_iter()
        .map(|img| extract_features(img, extractor).map_err(PipelineError::from))
        .collect()
}

/// Significance table of the scene against features extracted from `views`.
pub fn score_views(
    scene: &FeatureGaussianScene<f64>,
    k: &CameraIntrinsics<f64>,
    views: &[&SyntheticView],
    cfg: &LandmarkConfig,
) -> Result<SignificanceTable<f64>, PipelineError> {
    let images: Vec<&RgbImage<f64>> = views.iter().map(|v| &v.image).collect();
    let maps = extract_all(&images, &cfg.extractor)?;
    let sv: Vec<ScoreView<f64>> = maps
        .into_iter()
        .zip(views)
        .map(|(features, v)| ScoreView {
            features,
            pose: v.pose,
            intrinsics: *k,
        })
        .collect();
    Ok(score_scene(scene, &sv, cfg.batch_size)?)
}

pub fn select_landmarks(
    scene: &FeatureGaussianScene<f64>,
    table: &SignificanceTable<f64>,
    cfg: &LandmarkConfig,
) -> Result<LandmarkSet<f64>, PipelineError> {
    Ok(match cfg.sampler {
        Sampler::Knn => sample_landmarks(scene, table, cfg.q, cfg.k, cfg.seed)?,
        Sampler::Random => random_landmarks(scene, table, cfg.q, cfg.seed),
    })
}

/// Feature maps of the training images paired with landmark-projection labels.
pub fn detector_samples(
    scene: &FeatureGaussianScene<f64>,
    k: &CameraIntrinsics<f64>,
    views: &[&SyntheticView],
    landmarks: &LandmarkSet<f64>,
    cfg: &DetectorTrainConfig,
) -> Result<Vec<(DenseFeatureMap<f64>, LabelMap)>, PipelineError> {
    let images: Vec<&RgbImage<f64>> = views.iter().map(|v| &v.image).collect();
    let maps = extract_all(&images, &cfg.extractor)?;
    Ok(maps
        .into_iter()
        .zip(views)
        .map(|(m, v)| {
            let labels = make_labels(scene, landmarks, &v.pose, k, m.stride, cfg.label_radius);
            (m, labels)
        })
        .collect())
}

pub fn train_detector_on(
    scene: &FeatureGaussianScene<f64>,
    k: &CameraIntrinsics<f64>,
    views: &[&SyntheticView],
    landmarks: &LandmarkSet<f64>,
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorParams<f64>, Vec<f64>), PipelineError> {
    let samples = detector_samples(scene, k, views, landmarks, cfg)?;
    Ok(train_detector(&samples, &cfg.train)?)
}

/// Everything a query needs at localization time.
#[derive(Debug, Clone, Copy)]
pub struct Model<'a> {
    pub scene: &'a FeatureGaussianScene<f64>,
    pub landmarks: &'a LandmarkSet<f64>,
    pub detector: &'a DetectorParams<f64>,
    pub intrinsics: &'a CameraIntrinsics<f64>,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Sparse stage only: detect, match against landmarks, PnP-RANSAC.
pub fn initial_pose(
    model: &Model,
    features: &DenseFeatureMap<f64>,
    cfg: &LocalizeConfig,
) -> Result<PnPResult<f64>, String> {
    let prob = infer(model.detector, features).map_err(|e| format!("detector: {e}"))?;
    let kps = detect_keypoints(&prob, cfg.detector_tau, cfg.nms_radius, cfg.max_keypoints);
    let corrs = match_sparse(&kps, features, model.landmarks, cfg.top_k).map_err(|e| format!("sparse matching: {e}"))?;
    solve_pnp_ransac(&corrs, model.intrinsics, cfg.tau_px, cfg.ransac_iters, cfg.seed).map_err(|e| format!("pnp: {e}"))
}

/// Full localization of one query image.
pub fn localize(model: &Model, image: &RgbImage<f64>, cfg: &LocalizeConfig) -> LocalizationResult<f64> {
    let t0 = Instant::now();
    let features = match extract_features(image, &cfg.extractor) {
        Ok(f) => f,
        Err(e) => return LocalizationResult::failed(format!("features: {e}"), ms(t0)),
    };
    let init = match initial_pose(model, &features, cfg) {
        Ok(r) => r.pose,
        Err(e) => return LocalizationResult::failed(e, ms(t0)),
    };
    let sparse_ms = ms(t0);
    match refine_pose(&features, model.scene, model.intrinsics, &init, &cfg.refine) {
        Ok(trace) => LocalizationResult::assemble(init, trace, cfg.tau_ang_deg, sparse_ms),
        Err(e) => {
            let mut r = LocalizationResult::failed(format!("refine: {e}"), sparse_ms);
            r.initial_pose = Some(init);
            r
        }
    }
}

/// Localizes every `(id, image)` in parallel; output is sorted by id.
pub fn localize_all(model: &Model, queries: &[(String, &RgbImage<f64>)], cfg: &LocalizeConfig) -> Vec<QueryResult> {
    let mut out: Vec<QueryResult> = queries
        .par_iter()
        .map(|(id, img)| QueryResult {
            query_id: id.clone(),
            result: localize(model, img, cfg),
        })
        .collect();
    out.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    out
}

/// Artifacts of running all training stages on a dataset.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub scene: FeatureGaussianScene<f64>,
    pub feature_losses: Vec<LossRecord>,
    pub landmarks: LandmarkSet<f64>,
    pub detector: DetectorParams<f64>,
    pub detector_losses: Vec<f64>,
}

impl TrainedModel {
    pub fn model<'a>(&'a self, k: &'a CameraIntrinsics<f64>) -> Model<'a> {
        Model {
            scene: &self.scene,
            landmarks: &self.landmarks,
            detector: &self.detector,
            intrinsics: k,
        }
    }
}

/// Feature training, landmark sampling and detector training on the train split.
pub fn train_all(
    ds: &SyntheticDataset,
    features: &TrainConfig,
    landmarks: &LandmarkConfig,
    detector: &DetectorTrainConfig,
) -> Result<TrainedModel, PipelineError> {
    let train = ds.train_views();
    if train.is_empty() {
        return Err(PipelineError::InvalidArgument("dataset has no training views".into()));
    }
    let (scene, feature_losses) = train_features(&ds.scene, &ds.intrinsics, &train, features)?;
    let table = score_views(&scene, &ds.intrinsics, &train, landmarks)?;
    let lm = select_landmarks(&scene, &table, landmarks)?;
    let (det, detector_losses) = train_detector_on(&scene, &ds.intrinsics, &train, &lm, detector)?;
    Ok(TrainedModel {
        scene,
        feature_losses,
        landmarks: lm,
        detector: det,
        detector_losses,
    })
}

/// Reference pose lookup for a dataset's query split.
pub fn query_images(ds: &SyntheticDataset) -> Vec<(String, &RgbImage<f64>)> {
    ds.query_views().into_iter().map(|v| (v.id.clone(), &v.image)).collect()
}

pub fn ground_truth(ds: &SyntheticDataset) -> std::collections::BTreeMap<String, Pose<f64>> {
    ds.views.iter().map(|v| (v.id.clone(), v.pose)).collect()
}
