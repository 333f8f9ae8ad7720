//! Initial pose from sparse 2D–3D matches: keypoint-to-landmark matching by
//! cosine similarity, then PnP inside RANSAC and a robust least-squares polish.

mod p3p;

use nalgebra::{Matrix6, Vector2, Vector3, Vector6};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::KeypointSet;
use crate::features::DenseFeatureMap;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::landmarks::LandmarkSet;
use crate::scalar::{total_cmp, Scalar};

pub use p3p::{p3p, p4p_pick};

pub const DEFAULT_TOP_K: usize = 1024;
pub const DEFAULT_TAU_PX: f64 = 3.0;
pub const DEFAULT_MAX_ITERS: usize = 2000;
/// RANSAC stops early once an outlier-free sample has been drawn with this probability.
pub const RANSAC_CONFIDENCE: f64 = 0.9999;
const BATCH: usize = 64;
const LM_ITERS: usize = 50;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("insufficient correspondences: {found} found, at least 4 required")]
    InsufficientCorrespondences { found: usize },
    #[error("pnp failed: best hypothesis had {best_inliers} inliers after {iterations} iterations")]
    PnpFailed { best_inliers: usize, iterations: usize },
}

/// One 2D–3D pair. `keypoint` and `landmark` index the sets the pair came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Scalar> {
    pub pixel: Vector2<T>,
    pub point: Vector3<T>,
    pub similarity: T,
    pub keypoint: usize,
    pub landmark: usize,
}

/// Pairs sorted by similarity, highest first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet<T: Scalar> {
    pub pairs: Vec<Correspondence<T>>,
}

impl<T: Scalar> CorrespondenceSet<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Builds a set from unsorted pairs, sorting by similarity (stable on input order).
    pub fn from_pairs(mut pairs: Vec<Correspondence<T>>) -> Self {
        pairs.sort_by(|a, b| total_cmp(&b.similarity, &a.similarity));
        Self { pairs }
    }

    pub fn pixels(&self) -> Vec<Vector2<T>> {
        self.pairs.iter().map(|p| p.pixel).collect()
    }

    pub fn points(&self) -> Vec<Vector3<T>> {
        self.pairs.iter().map(|p| p.point).collect()
    }
}

fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = v.iter().fold(T::zero(), |a, x| a + *x * *x).sqrt();
    if n > T::zero() {
        v.iter().map(|x| *x / n).collect()
    } else {
        vec![T::zero(); v.len()]
    }
}

fn clamp_unit<T: Scalar>(v: T) -> T {
    v.max(-T::one()).min(T::one())
}

/// Top-k keypoint-to-landmark pairs.
///
/// Each keypoint takes its most similar landmark (lowest index on ties); a
/// landmark claimed by several keypoints keeps only the most similar one
/// (lowest keypoint index on ties). The survivors are sorted by similarity
/// and truncated to `top_k`.
pub fn match_sparse<T: Scalar>(
    keypoints: &KeypointSet<T>,
    query_features: &DenseFeatureMap<T>,
    landmarks: &LandmarkSet<T>,
    top_k: usize,
) -> Result<CorrespondenceSet<T>, SparseError> {
    if top_k < 4 {
        return Err(SparseError::InvalidArgument(format!("top_k must be at least 4, got {top_k}")));
    }
    let d = query_features.dim;
    if landmarks.features.iter().any(|f| f.len() != d) {
        return Err(SparseError::InvalidArgument(format!(
            "landmark feature dimension differs from query map dimension {d}"
        )));
    }
    let lm: Vec<Vec<T>> = landmarks.features.iter().map(|f| unit(f)).collect();
    let best: Vec<Option<(usize, T)>> = keypoints
        .cells
        .par_iter()
        .map(|&(u, v)| {
            if v >= query_features.height || u >= query_features.width {
                return None;
            }
            let q = unit(&query_features.cell(v, u));
            let mut best: Option<(usize, T)> = None;
            for (j, l) in lm.iter().enumerate() {
                let s = q.iter().zip(l).fold(T::zero(), |a, (x, y)| a + *x * *y);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            best
        })
        .collect();
    let mut claim: Vec<Option<(usize, T)>> = vec![None; landmarks.centers.len()];
    for (i, b) in best.iter().enumerate() {
        if let Some((j, s)) = *b {
            if claim[j].map_or(true, |(_, cs)| s > cs) {
                claim[j] = Some((i, s));
            }
        }
    }
    let pairs: Vec<Correspondence<T>> = claim
        .iter()
        .enumerate()
        .filter_map(|(j, c)| {
            c.map(|(i, s)| Correspondence {
                pixel: keypoints.pixels[i],
                point: landmarks.centers[j],
                similarity: clamp_unit(s),
                keypoint: i,
                landmark: j,
            })
        })
        .collect();
    let mut pairs = pairs;
    pairs.sort_by(|a, b| total_cmp(&b.similarity, &a.similarity).then(a.keypoint.cmp(&b.keypoint)));
    pairs.truncate(top_k);
    if pairs.len() < 4 {
        return Err(SparseError::InsufficientCorrespondences { found: pairs.len() });
    }
    Ok(CorrespondenceSet { pairs })
}

/// Recovered pose plus the inlier indices into the correspondence set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnPResult<T: Scalar> {
    pub pose: Pose<T>,
    pub inliers: Vec<usize>,
    /// Mean inlier reprojection error in pixels.
    pub mean_reprojection_error: T,
    /// RANSAC hypotheses evaluated.
    pub iterations: usize,
}

/// Reprojection error in pixels; infinite for points at or behind the camera.
pub fn reprojection_error<T: Scalar>(pose: &Pose<T>, k: &CameraIntrinsics<T>, point: &Vector3<T>, pixel: &Vector2<T>) -> T {
    let x = pose.transform(point);
    if !(x.z > T::zero()) {
        return T::lit(f64::INFINITY);
    }
    (k.project(&x) - pixel).norm()
}

fn inliers_of<T: Scalar>(pose: &Pose<T>, k: &CameraIntrinsics<T>, corrs: &[Correspondence<T>], tau: T) -> (Vec<usize>, T) {
    let tau2 = tau * tau;
    let mut idx = Vec::new();
    let mut cost = T::zero();
    for (i, c) in corrs.iter().enumerate() {
        let e = reprojection_error(pose, k, &c.point, &c.pixel);
        if e <= tau {
            idx.push(i);
            cost += e * e;
        } else {
            cost += tau2;
        }
    }
    (idx, cost)
}

fn bearing<T: Scalar>(k: &CameraIntrinsics<T>, px: &Vector2<T>) -> Vector3<T> {
    Vector3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, T::one()).normalize()
}

fn hypothesis<T: Scalar>(
    corrs: &[Correspondence<T>],
    k: &CameraIntrinsics<T>,
    seed: u64,
    h: usize,
) -> Option<Pose<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h as u64);
    let s = rand::seq::index::sample(&mut rng, corrs.len(), 4);
    let pick = |i: usize| corrs[s.index(i)];
    let b = [0, 1, 2, 3].map(|i| bearing(k, &pick(i).pixel));
    let w = [0, 1, 2, 3].map(|i| pick(i).point);
    p4p_pick(&b, &w)
}

/// Robust PnP: 4-point RANSAC over P3P hypotheses, then Levenberg–Marquardt on
/// the truncated quadratic `min(e², τ²)`. Deterministic for a given seed.
pub fn solve_pnp_ransac<T: Scalar>(
    corrs: &CorrespondenceSet<T>,
    k: &CameraIntrinsics<T>,
    tau_px: T,
    max_iters: usize,
    seed: u64,
) -> Result<PnPResult<T>, SparseError> {
    let pairs = &corrs.pairs;
    if pairs.len() < 4 {
        return Err(SparseError::InsufficientCorrespondences { found: pairs.len() });
    }
    if !(tau_px > T::zero()) || max_iters == 0 {
        return Err(SparseError::InvalidArgument("tau_px must be positive and max_iters nonzero".into()));
    }
    let n = pairs.len();
    let mut best: Option<(usize, T, Pose<T>)> = None;
    let mut done = 0usize;
    while done < max_iters {
        let end = (done + BATCH).min(max_iters);
        let scored: Vec<Option<(usize, T, Pose<T>)>> = (done..end)
            .into_par_iter()
            .map(|h| {
                hypothesis(pairs, k, seed, h).map(|pose| {
                    let (inl, cost) = inliers_of(&pose, k, pairs, tau_px);
                    (inl.len(), cost, pose)
                })
            })
            .collect();
        // sequential reduction in hypothesis order keeps the result seed-stable
        for (cnt, cost, pose) in scored.into_iter().flatten() {
            let better = best
                .as_ref()
                .map_or(true, |(bc, bcost, _)| cnt > *bc || (cnt == *bc && cost < *bcost));
            if better {
                best = Some((cnt, cost, pose));
            }
        }
        done = end;
        if let Some((cnt, _, _)) = &best {
            let w = *cnt as f64 / n as f64;
            let needed = if w >= 1.0 {
                0.0
            } else {
                (1.0 - RANSAC_CONFIDENCE).ln() / (1.0 - w.powi(4)).ln()
            };
            if (done as f64) >= needed {
                break;
            }
        }
    }
    let (cnt, _, pose) = match best {
        Some(b) if b.0 >= 4 => b,
        other => {
            return Err(SparseError::PnpFailed {
                best_inliers: other.map_or(0, |b| b.0),
                iterations: done,
            })
        }
    };
    log::debug!("ransac: {cnt}/{n} inliers after {done} hypotheses");
    let refined = refine_truncated(&pose, k, pairs, tau_px, LM_ITERS);
    let (inliers, _) = inliers_of(&refined, k, pairs, tau_px);
    // keep the unrefined model if the polish lost support
    let (pose, inliers) = if inliers.len() >= cnt {
        (refined, inliers)
    } else {
        (pose, inliers_of(&pose, k, pairs, tau_px).0)
    };
    if inliers.len() < 4 {
        return Err(SparseError::PnpFailed {
            best_inliers: inliers.len(),
            iterations: done,
        });
    }
    let mean = inliers
        .iter()
        .fold(T::zero(), |a, &i| a + reprojection_error(&pose, k, &pairs[i].point, &pairs[i].pixel))
        / T::from_usize_lossy(inliers.len());
    Ok(PnPResult {
        pose,
        inliers,
        mean_reprojection_error: mean,
        iterations: done,
    })
}

fn truncated_cost<T: Scalar>(pose: &Pose<T>, k: &CameraIntrinsics<T>, corrs: &[Correspondence<T>], tau: T) -> T {
    inliers_of(pose, k, corrs, tau).1
}

/// Levenberg–Marquardt on `Σ min(e², τ²)` starting from `pose`. Residuals
/// beyond `τ` sit on the flat part of the loss and contribute no gradient.
pub fn refine_truncated<T: Scalar>(
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
    corrs: &[Correspondence<T>],
    tau: T,
    max_iters: usize,
) -> Pose<T> {
    let mut pose = *pose;
    let mut cost = truncated_cost(&pose, k, corrs, tau);
    let mut lambda = T::lit(1e-3);
    for _ in 0..max_iters {
        let mut jtj = Matrix6::<T>::zeros();
        let mut jtr = Vector6::<T>::zeros();
        let mut active = 0;
        for c in corrs {
            let x = pose.transform(&c.point);
            if !(x.z > T::zero()) {
                continue;
            }
            let r = k.project(&x) - c.pixel;
            if r.norm() > tau {
                continue;
            }
            active += 1;
            let iz = T::one() / x.z;
            let iz2 = iz * iz;
            // d(pixel)/d(x_cam)
            let (a0, a2) = (k.fx * iz, -k.fx * x.x * iz2);
            let (b1, b2) = (k.fy * iz, -k.fy * x.y * iz2);
            // d(x_cam)/dω = -[x]×, d(x_cam)/dv = I
            let ju = Vector6::new(
                a2 * x.y,
                a0 * x.z - a2 * x.x,
                -a0 * x.y,
                a0,
                T::zero(),
                a2,
            );
            let jv = Vector6::new(
                -b1 * x.z + b2 * x.y,
                -b2 * x.x,
                b1 * x.x,
                T::zero(),
                b1,
                b2,
            );
            jtj += ju * ju.transpose() + jv * jv.transpose();
            jtr += ju * r.x + jv * r.y;
        }
        if active < 3 {
            break;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for i in 0..6 {
                a[(i, i)] += lambda * (jtj[(i, i)] + T::lit(1e-12));
            }
            let step = match a.cholesky() {
                Some(ch) => ch.solve(&(-jtr)),
                None => {
                    lambda *= T::lit(10.0);
                    continue;
                }
            };
            let cand = pose.perturbed(&step.fixed_rows::<3>(0).into(), &step.fixed_rows::<3>(3).into());
            let c2 = truncated_cost(&cand, k, corrs, tau);
            if c2 < cost {
                let small = cost - c2 <= T::lit(1e-14) * cost;
                pose = cand.orthonormalized();
                cost = c2;
                lambda = (lambda * T::lit(0.3)).max(T::lit(1e-12));
                improved = true;
                if small || step.norm() < T::lit(1e-15) {
                    return pose;
                }
                break;
            }
            lambda *= T::lit(10.0);
        }
        if !improved {
            break;
        }
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::pose_difference;
    use rand::Rng;

    fn cam() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    fn truth() -> Pose<f64> {
        Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.05), Vector3::new(0.3, -0.1, 5.0))
    }

    /// Points inside the view frustum of `truth()` and their exact projections.
    fn fixture(n: usize, seed: u64) -> (Vec<Correspondence<f64>>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (pose, k) = (truth(), cam());
        let inv = pose.inverse();
        let pts: Vec<Correspondence<f64>> = (0..n)
            .map(|i| {
                let px = Vector2::new(rng.gen_range(20.0..620.0), rng.gen_range(20.0..460.0));
                let depth = rng.gen_range(3.0..7.0);
                let world = inv.transform(&k.back_project(&px, depth));
                Correspondence {
                    pixel: px,
                    point: world,
                    similarity: 1.0,
                    keypoint: i,
                    landmark: i,
                }
            })
            .collect();
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in &pts {
            lo = lo.inf(&p.point);
            hi = hi.sup(&p.point);
        }
        (pts, (hi - lo).norm())
    }

    fn keypoints(pixels: Vec<Vector2<f64>>, cells: Vec<(usize, usize)>) -> KeypointSet<f64> {
        let n = pixels.len();
        KeypointSet {
            cells,
            pixels,
            confidences: vec![1.0; n],
        }
    }

    fn landmark_set(features: Vec<Vec<f64>>) -> LandmarkSet<f64> {
        let n = features.len();
        LandmarkSet {
            indices: (0..n).collect(),
            scores: vec![1.0; n],
            centers: (0..n).map(|i| Vector3::new(i as f64, 0.0, 0.0)).collect(),
            features,
        }
    }

    fn one_hot(d: usize, i: usize) -> Vec<f64> {
        (0..d).map(|c| if c == i { 1.0 } else { 0.0 }).collect()
    }

    fn map_from_cells(d: usize, w: usize, cells: &[Vec<f64>]) -> DenseFeatureMap<f64> {
        let mut m = DenseFeatureMap::zeros(d, 1, w, 4);
        for (x, f) in cells.iter().enumerate() {
            for c in 0..d {
                m.set(c, 0, x, f[c]);
            }
        }
        m
    }

    #[test]
    fn identical_feature_pairs_with_similarity_one() {
        let d = 6;
        let lms = landmark_set((0..6).map(|i| one_hot(d, i)).collect());
        let cells: Vec<Vec<f64>> = [2, 0, 5, 3].iter().map(|&i| one_hot(d, i)).collect();
        let map = map_from_cells(d, 4, &cells);
        let kp = keypoints((0..4).map(|x| Vector2::new(x as f64 * 4.0 + 1.5, 1.5)).collect(), (0..4).map(|x| (x, 0)).collect());
        let set = match_sparse(&kp, &map, &lms, 10).unwrap();
        assert_eq!(set.len(), 4);
        for p in &set.pairs {
            assert_eq!(p.landmark, [2, 0, 5, 3][p.keypoint]);
            assert!((p.similarity - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn landmark_keeps_only_its_best_keypoint() {
        let d = 5;
        let lms = landmark_set((0..5).map(|i| one_hot(d, i)).collect());
        let mut near = one_hot(d, 0);
        near[1] = 0.2;
        let mut nearer = one_hot(d, 0);
        nearer[1] = 0.1;
        let cells = vec![near, nearer, one_hot(d, 2), one_hot(d, 3), one_hot(d, 4)];
        let map = map_from_cells(d, 5, &cells);
        let kp = keypoints(vec![Vector2::zeros(); 5], (0..5).map(|x| (x, 0)).collect());
        let set = match_sparse(&kp, &map, &lms, 10).unwrap();
        let for_zero: Vec<_> = set.pairs.iter().filter(|p| p.landmark == 0).collect();
        assert_eq!(for_zero.len(), 1);
        assert_eq!(for_zero[0].keypoint, 1);
        assert_eq!(set.len(), 4);
    }

    #[test]
    fn matches_brute_force_all_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, n) = (16, 50);
        let rand_vec = |rng: &mut ChaCha8Rng| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let lf: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng)).collect();
        let qf: Vec<Vec<f64>> = (0..n).map(|_| rand_vec(&mut rng)).collect();
        let lms = landmark_set(lf.clone());
        let map = map_from_cells(d, n, &qf);
        let kp = keypoints(vec![Vector2::zeros(); n], (0..n).map(|x| (x, 0)).collect());
        for top_k in [4usize, 20, 1024] {
            let set = match_sparse(&kp, &map, &lms, top_k).unwrap();
            // oracle: full similarity table
            let cos = |a: &[f64], b: &[f64]| {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
            };
            let sim: Vec<Vec<f64>> = qf.iter().map(|q| lf.iter().map(|l| cos(q, l)).collect()).collect();
            let arg: Vec<usize> = sim
                .iter()
                .map(|row| (0..n).fold(0, |b, j| if row[j] > row[b] { j } else { b }))
                .collect();
            let mut want: Vec<(usize, usize, f64)> = Vec::new();
            for j in 0..n {
                let owners: Vec<usize> = (0..n).filter(|&i| arg[i] == j).collect();
                if let Some(&i) = owners.iter().max_by(|&&a, &&b| sim[a][j].total_cmp(&sim[b][j]).then(b.cmp(&a))) {
                    want.push((i, j, sim[i][j]));
                }
            }
            want.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            want.truncate(top_k);
            let got: Vec<(usize, usize)> = set.pairs.iter().map(|p| (p.keypoint, p.landmark)).collect();
            let want_ids: Vec<(usize, usize)> = want.iter().map(|w| (w.0, w.1)).collect();
            assert_eq!(got, want_ids, "top_k={top_k}");
            for (p, w) in set.pairs.iter().zip(&want) {
                assert!((p.similarity - w.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn too_few_pairs_is_an_error() {
        let d = 3;
        let lms = landmark_set((0..3).map(|i| one_hot(d, i)).collect());
        let map = map_from_cells(d, 3, &[one_hot(d, 0), one_hot(d, 1), one_hot(d, 2)]);
        let kp = keypoints(vec![Vector2::zeros(); 3], (0..3).map(|x| (x, 0)).collect());
        assert_eq!(
            match_sparse(&kp, &map, &lms, 8),
            Err(SparseError::InsufficientCorrespondences { found: 3 })
        );
        assert!(matches!(match_sparse(&kp, &map, &lms, 3), Err(SparseError::InvalidArgument(_))));
    }

    #[test]
    fn noise_free_pose_recovery() {
        let (pts, extent) = fixture(20, 1);
        let set = CorrespondenceSet::from_pairs(pts);
        let res = solve_pnp_ransac(&set, &cam(), DEFAULT_TAU_PX, DEFAULT_MAX_ITERS, 0).unwrap();
        let diff = pose_difference(&res.pose, &truth());
        assert!(diff.angular_deg < 1e-6, "{diff:?}");
        assert!(diff.translational < 1e-6 * extent, "{diff:?}");
        assert_eq!(res.inliers.len(), 20);
        assert!(res.mean_reprojection_error < 1e-6);
    }

    #[test]
    fn outliers_are_rejected_exactly() {
        let (mut pts, extent) = fixture(20, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let inv = truth().inverse();
        let k = cam();
        // 40% of the final set: 20 clean + 13 outliers with random pixels
        for i in 0..13 {
            let world = inv.transform(&k.back_project(&Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)), rng.gen_range(3.0..7.0)));
            pts.push(Correspondence {
                pixel: Vector2::new(rng.gen_range(0.0..640.0), rng.gen_range(0.0..480.0)),
                point: world,
                similarity: 0.5,
                keypoint: 20 + i,
                landmark: 20 + i,
            });
        }
        let set = CorrespondenceSet::from_pairs(pts);
        let res = solve_pnp_ransac(&set, &k, 2.0, DEFAULT_MAX_ITERS, 5).unwrap();
        let mut clean: Vec<usize> = res.inliers.iter().map(|&i| set.pairs[i].keypoint).collect();
        clean.sort();
        assert_eq!(clean, (0..20).collect::<Vec<_>>());
        let diff = pose_difference(&res.pose, &truth());
        assert!(diff.angular_deg < 1e-6 && diff.translational < 1e-6 * extent, "{diff:?}");
        // post-hoc inlier check
        for &i in &res.inliers {
            let p = &set.pairs[i];
            assert!(reprojection_error(&res.pose, &k, &p.point, &p.pixel) <= 2.0);
        }
    }

    #[test]
    fn collinear_points_fail_without_nan() {
        let k = cam();
        let pose = truth();
        let inv = pose.inverse();
        let pts: Vec<Correspondence<f64>> = (0..4)
            .map(|i| {
                let world = inv.transform(&Vector3::new(-1.0 + i as f64 * 0.5, 0.2, 5.0));
                Correspondence {
                    pixel: k.project(&pose.transform(&world)),
                    point: world,
                    similarity: 1.0,
                    keypoint: i,
                    landmark: i,
                }
            })
            .collect();
        let res = solve_pnp_ransac(&CorrespondenceSet::from_pairs(pts), &k, 3.0, 200, 0);
        assert!(matches!(res, Err(SparseError::PnpFailed { .. })), "{res:?}");
    }

    #[test]
    fn seed_determinism() {
        let (mut pts, _) = fixture(30, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for p in pts.iter_mut().step_by(3) {
            p.pixel += Vector2::new(rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0));
        }
        for p in pts.iter_mut() {
            p.pixel += Vector2::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
        }
        let set = CorrespondenceSet::from_pairs(pts);
        let a = solve_pnp_ransac(&set, &cam(), 3.0, 500, 11).unwrap();
        let b = solve_pnp_ransac(&set, &cam(), 3.0, 500, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn error_grows_with_pixel_noise() {
        let k = cam();
        let mut medians = Vec::new();
        for sigma in [0.0, 0.5, 1.0] {
            let mut errs = Vec::new();
            for trial in 0..15u64 {
                let (mut pts, _) = fixture(20, 100 + trial);
                // fixed standard normal draws, scaled per noise level
                let mut rng = ChaCha8Rng::seed_from_u64(500 + trial);
                for p in pts.iter_mut() {
                    let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen_range(0.0..1.0));
                    let r = (-2.0 * u1.ln()).sqrt();
                    let a = 2.0 * std::f64::consts::PI * u2;
                    p.pixel += Vector2::new(r * a.cos(), r * a.sin()) * sigma;
                }
                let res = solve_pnp_ransac(&CorrespondenceSet::from_pairs(pts), &k, 5.0, DEFAULT_MAX_ITERS, trial).unwrap();
                errs.push(pose_difference(&res.pose, &truth()).angular_deg);
            }
            errs.sort_by(f64::total_cmp);
            medians.push(errs[errs.len() / 2]);
        }
        assert!(medians[0] <= medians[1] && medians[1] <= medians[2], "{medians:?}");
    }

    #[test]
    fn result_json_round_trip() {
        let (pts, _) = fixture(12, 8);
        let res = solve_pnp_ransac(&CorrespondenceSet::from_pairs(pts), &cam(), 3.0, 100, 0).unwrap();
        let s = serde_json::to_string(&res).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["pose"]["convention"], "w2c");
        assert!(v["inliers"].is_array() && v["iterations"].is_u64());
        let back: PnPResult<f64> = serde_json::from_str(&s).unwrap();
        assert_eq!(back.inliers, res.inliers);
    }
}
