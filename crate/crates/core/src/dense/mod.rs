//! Iterative pose refinement by dense matching against renders at the current
//! estimate, and the consistency check over the resulting trace.

mod matching;

use std::time::Instant;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DenseFeatureMap;
use crate::geometry::{cell_to_pixel, pose_difference, CameraIntrinsics, Pose, PoseDifference};
use crate::raster::{render, Channels, RenderedPackage};
use crate::scalar::Scalar;
use crate::scene::FeatureGaussianScene;
use crate::sparse::{solve_pnp_ransac, Correspondence, CorrespondenceSet};

pub use matching::{
    average_pool, coarse_to_fine_match, mutual_nn, pmm, CoarseMatch, DenseMatchSet, FineMatch, WINDOW,
};

pub const DEFAULT_TAU_ANG_DEG: f64 = 20.0;

#[derive(Debug, Error, PartialEq)]
pub enum DenseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Similarity matrix with its mutually constrained probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchMatrix<T: Scalar> {
    pub sim: nalgebra::DMatrix<T>,
    pub prob: nalgebra::DMatrix<T>,
    pub temperature: T,
}

impl<T: Scalar> MatchMatrix<T> {
    pub fn new(sim: nalgebra::DMatrix<T>, temperature: T) -> Self {
        let prob = pmm(&sim, temperature);
        Self { sim, prob, temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub iterations: usize,
    pub temperature: f64,
    pub p_min: f64,
    /// Rendered pixels with less coverage give no 3D point.
    pub min_alpha: f64,
    pub tau_px: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            temperature: 0.1,
            p_min: 0.05,
            min_alpha: 0.5,
            tau_px: crate::sparse::DEFAULT_TAU_PX,
            max_iters: crate::sparse::DEFAULT_MAX_ITERS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep<T: Scalar> {
    pub pose: Pose<T>,
    pub inliers: usize,
    pub matches: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub sparse: f64,
    pub render: f64,
    #[serde(rename = "match")]
    pub matching: f64,
    pub pnp: f64,
    pub verify: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementTrace<T: Scalar> {
    pub steps: Vec<TraceStep<T>>,
    /// Why the loop stopped before `n` iterations, if it did.
    pub failure: Option<String>,
    pub timings: StageTimings,
}

impl<T: Scalar> RefinementTrace<T> {
    pub fn poses(&self) -> Vec<Pose<T>> {
        self.steps.iter().map(|s| s.pose).collect()
    }

    pub fn last_pose(&self) -> Option<Pose<T>> {
        self.steps.last().map(|s| s.pose)
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Bilinear normalized depth at a sub-cell position; nearest cell when a corner lacks coverage.
fn depth_at<T: Scalar>(pkg: &RenderedPackage<T>, pos: &Vector2<T>, min_alpha: T) -> Option<T> {
    let (w, h) = (pkg.width, pkg.height);
    let x = pos.x.as_f64().clamp(0.0, (w - 1) as f64);
    let y = pos.y.as_f64().clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let corners = [
        (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
        (y0 * w + x1, tx * (1.0 - ty)),
        (y1 * w + x0, (1.0 - tx) * ty),
        (y1 * w + x1, tx * ty),
    ];
    let mut acc = T::zero();
    for (p, wt) in corners {
        match pkg.normalized_depth(p, min_alpha) {
            Some(d) => acc += d * T::lit(wt),
            None => {
                let p = (y.round() as usize) * w + x.round() as usize;
                return pkg.normalized_depth(p, min_alpha);
            }
        }
    }
    Some(acc)
}

/// 2D–3D pairs from fine matches: query pixel at full resolution, 3D point
/// from rendered depth at the matched rendered position.
pub fn lift_matches<T: Scalar>(
    matches: &DenseMatchSet<T>,
    pkg: &RenderedPackage<T>,
    render_k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    stride: usize,
    min_alpha: T,
) -> CorrespondenceSet<T> {
    let inv = pose.inverse();
    let pairs = matches
        .fine
        .iter()
        .enumerate()
        .filter_map(|(i, m)| {
            let depth = depth_at(pkg, &m.rendered, min_alpha)?;
            let cam = render_k.back_project(&m.rendered, depth);
            Some(Correspondence {
                pixel: Vector2::new(cell_to_pixel(m.query.x, stride), cell_to_pixel(m.query.y, stride)),
                point: inv.transform(&cam),
                similarity: m.prob,
                keypoint: i,
                landmark: i,
            })
        })
        .collect();
    CorrespondenceSet::from_pairs(pairs)
}

/// `n` rounds of render, coarse-to-fine match, lift and PnP starting from `init`.
/// The query map's stride fixes the render resolution.
pub fn refine_pose<T: Scalar>(
    query: &DenseFeatureMap<T>,
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    init: &Pose<T>,
    cfg: &RefineConfig,
) -> Result<RefinementTrace<T>, DenseError> {
    if cfg.iterations == 0 {
        return Err(DenseError::InvalidArgument("iterations must be at least 1".into()));
    }
    if !init.is_valid(1e-6) {
        return Err(DenseError::InvalidArgument("initial pose is not a valid rigid transform".into()));
    }
    if !(cfg.temperature > 0.0) {
        return Err(DenseError::InvalidArgument("temperature must be positive".into()));
    }
    if query.dim != scene.feature_dim {
        return Err(DenseError::Shape(format!(
            "query features have {} channels, scene has {}",
            query.dim, scene.feature_dim
        )));
    }
    let stride = query.stride.max(1);
    let rk = k.downscaled(stride);
    if (rk.width, rk.height) != (query.width, query.height) {
        return Err(DenseError::Shape(format!(
            "query map {}x{} does not match image {}x{} at stride {stride}",
            query.width, query.height, k.width, k.height
        )));
    }
    let (temp, p_min, min_alpha) = (T::lit(cfg.temperature), T::lit(cfg.p_min), T::lit(cfg.min_alpha));
    let mut trace = RefinementTrace {
        steps: Vec::new(),
        failure: None,
        timings: StageTimings::default(),
    };
    let mut pose = *init;
    for it in 0..cfg.iterations {
        let t0 = Instant::now();
        let pkg = render(scene, &rk, &pose, Channels::FEATURE_DEPTH);
        let rendered = DenseFeatureMap::from_rendered(&pkg, stride);
        trace.timings.render += ms(t0);
        let t0 = Instant::now();
        let matches = coarse_to_fine_match(query, &rendered, temp, p_min);
        let corrs = lift_matches(&matches, &pkg, &rk, &pose, stride, min_alpha);
        trace.timings.matching += ms(t0);
        log::debug!(
            "refine {it}: {} coarse, {} fine, {} lifted",
            matches.coarse.len(),
            matches.fine.len(),
            corrs.len()
        );
        let t0 = Instant::now();
        let res = solve_pnp_ransac(&corrs, k, T::lit(cfg.tau_px), cfg.max_iters, cfg.seed.wrapping_add(it as u64));
        trace.timings.pnp += ms(t0);
        match res {
            Ok(r) => {
                pose = r.pose;
                trace.steps.push(TraceStep {
                    pose,
                    inliers: r.inliers.len(),
                    matches: corrs.len(),
                });
            }
            Err(e) => {
                trace.failure = Some(format!("iteration {}: {e}", it + 1));
                break;
            }
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict<T: Scalar> {
    Reliable(Pose<T>),
    Unreliable(String),
}

impl<T: Scalar> Verdict<T> {
    pub fn is_reliable(&self) -> bool {
        matches!(self, Verdict::Reliable(_))
    }
}

/// Differences of consecutive trace poses, and the verdict. Only the angular
/// part is gated; the translational part is reported.
pub fn verify_consistency<T: Scalar>(poses: &[Pose<T>], tau_ang_deg: T) -> (Verdict<T>, Vec<PoseDifference<T>>) {
    if poses.len() < 2 {
        return (Verdict::Unreliable("insufficient iterations".into()), Vec::new());
    }
    let diffs: Vec<PoseDifference<T>> = poses.windows(2).map(|w| pose_difference(&w[0], &w[1])).collect();
    for (i, d) in diffs.iter().enumerate() {
        log::debug!("pair ({}, {}): {:.4} deg, {:.6} trans", i + 1, i + 2, d.angular_deg, d.translational);
    }
    for (i, d) in diffs.iter().enumerate() {
        if d.angular_deg > tau_ang_deg {
            return (
                Verdict::Unreliable(format!(
                    "poses {} and {} differ by {:.3} deg (> {:.3})",
                    i + 1,
                    i + 2,
                    d.angular_deg,
                    tau_ang_deg
                )),
                diffs,
            );
        }
    }
    (Verdict::Reliable(*poses.last().unwrap()), diffs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Reliable,
    Unreliable,
}

/// Output of one localization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult<T: Scalar> {
    /// Sparse-stage estimate; absent when the sparse stage failed.
    pub initial_pose: Option<Pose<T>>,
    pub trace: Vec<TraceStep<T>>,
    pub verdict: VerdictKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Last trace pose when reliable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_pose: Option<Pose<T>>,
    pub timings_ms: StageTimings,
}

impl<T: Scalar> LocalizationResult<T> {
    /// Verifies `trace` and assembles the result. A truncated trace is unreliable.
    pub fn assemble(initial_pose: Pose<T>, trace: RefinementTrace<T>, tau_ang_deg: T, sparse_ms: f64) -> Self {
        let initial_pose = Some(initial_pose);
        let t0 = Instant::now();
        let (verdict, _) = verify_consistency(&trace.poses(), tau_ang_deg);
        let verdict = match (&trace.failure, verdict) {
            (Some(f), _) => Verdict::Unreliable(f.clone()),
            (None, v) => v,
        };
        let mut timings = trace.timings;
        timings.sparse = sparse_ms;
        timings.verify = ms(t0);
        let (kind, reason, final_pose) = match verdict {
            Verdict::Reliable(p) => (VerdictKind::Reliable, None, Some(p)),
            Verdict::Unreliable(r) => (VerdictKind::Unreliable, Some(r), None),
        };
        Self {
            initial_pose,
            trace: trace.steps,
            verdict: kind,
            reason,
            final_pose,
            timings_ms: timings,
        }
    }

    /// Result of a run that never produced a pose.
    pub fn failed(reason: String, sparse_ms: f64) -> Self {
        Self {
            initial_pose: None,
            trace: Vec::new(),
            verdict: VerdictKind::Unreliable,
            reason: Some(reason),
            final_pose: None,
            timings_ms: StageTimings {
                sparse: sparse_ms,
                ..Default::default()
            },
        }
    }

    pub fn is_reliable(&self) -> bool {
        self.verdict == VerdictKind::Reliable
    }

    /// Final pose if reliable, else the last trace pose, else the initial pose.
    pub fn best_pose(&self) -> Option<Pose<T>> {
        self.final_pose.or_else(|| self.trace.last().map(|s| s.pose)).or(self.initial_pose)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn rot_z(deg: f64) -> Pose<f64> {
        Pose::from_axis_angle(Vector3::new(0.0, 0.0, deg.to_radians()), Vector3::new(0.0, 0.0, 4.0))
    }

    #[test]
    fn identical_poses_are_reliable() {
        let p = rot_z(10.0);
        let (v, d) = verify_consistency(&[p, p, p], 20.0);
        assert_eq!(v, Verdict::Reliable(p));
        assert_eq!(d.len(), 2);
        for x in d {
            assert!(x.angular_deg.abs() < 1e-9 && x.translational.abs() < 1e-12);
        }
    }

    #[test]
    fn threshold_boundary() {
        let (v, _) = verify_consistency(&[rot_z(0.0), rot_z(25.0)], 20.0);
        assert!(matches!(v, Verdict::Unreliable(ref r) if r.contains("poses 1 and 2")));
        // translation differs a lot but is not gated
        let far = Pose::from_axis_angle(Vector3::new(0.0, 0.0, 19.9f64.to_radians()), Vector3::new(50.0, 0.0, 4.0));
        let (v, d) = verify_consistency(&[rot_z(0.0), far], 20.0);
        assert!(v.is_reliable());
        assert!(d[0].translational > 10.0);
    }

    #[test]
    fn injected_outlier_pose_is_always_rejected() {
        for k in 0..3 {
            for dev in [20.5, 45.0, 179.0] {
                let mut poses = vec![rot_z(5.0); 4];
                poses[k + 1] = rot_z(5.0 + dev);
                let (v, _) = verify_consistency(&poses, 20.0);
                assert!(!v.is_reliable(), "k={k} dev={dev}");
            }
        }
    }

    #[test]
    fn single_pose_is_insufficient() {
        let (v, d) = verify_consistency(&[rot_z(0.0)], 20.0);
        assert_eq!(v, Verdict::Unreliable("insufficient iterations".into()));
        assert!(d.is_empty());
    }

    #[test]
    fn result_json_shape() {
        let p = rot_z(3.0);
        let trace = RefinementTrace {
            steps: vec![TraceStep { pose: p, inliers: 40, matches: 50 }, TraceStep { pose: p, inliers: 41, matches: 52 }],
            failure: None,
            timings: StageTimings::default(),
        };
        let r = LocalizationResult::assemble(p, trace, 20.0, 1.5);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["verdict"], "reliable");
        assert!(v.get("reason").is_none());
        assert_eq!(v["trace"][1]["inliers"], 41);
        for key in ["sparse", "render", "match", "pnp", "verify"] {
            assert!(v["timings_ms"][key].is_number(), "{key}");
        }
        let back: LocalizationResult<f64> = serde_json::from_value(v).unwrap();
        assert_eq!(back.verdict, VerdictKind::Reliable);

        let short = RefinementTrace {
            steps: vec![TraceStep { pose: p, inliers: 40, matches: 50 }],
            failure: None,
            timings: StageTimings::default(),
        };
        let r = LocalizationResult::assemble(p, short, 20.0, 0.0);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["verdict"], "unreliable");
        assert_eq!(v["reason"], "insufficient iterations");
    }
}
