//! Procedural scenes and survey-style camera sets with exact ground truth.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::RgbImage;
use crate::raster::{check_visibility, render, Channels};
use crate::scene::{FeatureGaussianScene, GaussianPrimitive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Textured heightfield covered by a jittered grid of surface splats.
    Terrain,
    /// Heightfield with most splats packed into a few dense blobs.
    Clustered,
    /// Splats scattered uniformly through the bounding box.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSceneSpec {
    pub gaussian_count: usize,
    pub extent: [f64; 3],
    pub profile: Profile,
    pub view_count: usize,
    /// Fraction of views used for training; the rest become queries.
    pub train_fraction: f64,
    /// Camera height above the top of the scene box, `[min, max]`.
    pub altitude: [f64; 2],
    pub image_size: [usize; 2],
    pub fov_deg: f64,
    /// Heading jitter around the common survey heading.
    pub yaw_jitter_deg: f64,
    pub tilt_deg: f64,
    /// Extra displacement of query views, as a fraction of the survey grid spacing.
    pub query_offset: f64,
    pub feature_dim: usize,
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            gaussian_count: 5000,
            extent: [20.0, 20.0, 3.0],
            profile: Profile::Terrain,
            view_count: 50,
            train_fraction: 0.8,
            altitude: [6.0, 7.0],
            image_size: [256, 256],
            fov_deg: 80.0,
            yaw_jitter_deg: 8.0,
            tilt_deg: 4.0,
            query_offset: 0.35,
            feature_dim: 16,
            min_visible: 100,
            seed: 0,
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::InvalidSpec(m.to_string()));
        if self.gaussian_count == 0 || self.view_count == 0 || self.feature_dim == 0 {
            return bad("gaussian_count, view_count and feature_dim must be >= 1");
        }
        if self.extent.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
            return bad("extent must be positive");
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return bad("train_fraction must lie in [0, 1]");
        }
        if !(self.altitude[0] > 0.0) || self.altitude[1] < self.altitude[0] {
            return bad("altitude must be a positive [min, max] range");
        }
        if self.image_size[0] < 8 || self.image_size[1] < 8 {
            return bad("image_size must be at least 8x8");
        }
        if !(self.fov_deg > 1.0 && self.fov_deg < 170.0) {
            return bad("fov_deg must lie in (1, 170)");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> CameraIntrinsics<f64> {
        let [w, h] = self.image_size;
        let f = 0.5 * w as f64 / (0.5 * self.fov_deg.to_radians()).tan();
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (w as f64 - 1.0) / 2.0,
            cy: (h as f64 - 1.0) / 2.0,
            width: w,
            height: h,
        }
    }

    /// Number of query views for the configured split.
    pub fn query_count(&self) -> usize {
        let train = (self.view_count as f64 * self.train_fraction).round() as usize;
        self.view_count - train.min(self.view_count)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticView {
    pub id: String,
    pub pose: Pose<f64>,
    pub image: RgbImage<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub query: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub scene: FeatureGaussianScene<f64>,
    pub intrinsics: CameraIntrinsics<f64>,
    pub views: Vec<SyntheticView>,
    pub split: Split,
}

impl SyntheticDataset {
    pub fn view(&self, id: &str) -> Option<&SyntheticView> {
        self.views.iter().find(|v| v.id == id)
    }

    pub fn train_views(&self) -> Vec<&SyntheticView> {
        self.split.train.iter().filter_map(|id| self.view(id)).collect()
    }

    pub fn query_views(&self) -> Vec<&SyntheticView> {
        self.split.query.iter().filter_map(|id| self.view(id)).collect()
    }

    /// Diagonal of the scene's bounding box.
    pub fn extent(&self) -> f64 {
        self.scene.bounds().map_or(0.0, |b| b.size())
    }
}

/// Smooth terrain heights in `[0, ez]`.
struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>,
    ez: f64,
}

impl Terrain {
    fn new(rng: &mut ChaCha8Rng, ex: f64, ey: f64, ez: f64) -> Self {
        let waves = (0..6)
            .map(|i| {
                let f = (1.0 + i as f64) * std::f64::consts::TAU / ex.max(ey);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                (f * a.cos(), f * a.sin(), rng.gen_range(0.0..std::f64::consts::TAU), 1.0 / (1.0 + i as f64))
            })
            .collect();
        Self { waves, ez }
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        self.waves.iter().map(|(kx, ky, ph, a)| a * (kx * x + ky * y + ph).sin()).sum()
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        let norm: f64 = self.waves.iter().map(|w| w.3).sum();
        0.5 * self.ez * (1.0 + self.raw(x, y) / norm)
    }

    fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let e = 1e-4;
        let dx = (self.height(x + e, y) - self.height(x - e, y)) / (2.0 * e);
        let dy = (self.height(x, y + e) - self.height(x, y - e)) / (2.0 * e);
        Vector3::new(-dx, -dy, 1.0).normalize()
    }
}

/// Non-periodic color field: random blobs over several scales plus one
/// low-amplitude grating, squashed into `(0, 1)`.
struct Texture {
    blobs: Vec<(f64, f64, f64, [f64; 3])>,
    grating: ([f64; 2], f64),
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng, ex: f64, ey: f64) -> Self {
        let count = ((ex * ey) * 1.5).round().max(8.0) as usize;
        let blobs = (0..count)
            .map(|_| {
                let r = 0.12 * (rng.gen_range(0.0..1.0f64) * (12.0f64).ln()).exp();
                let tint = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                let lum = rng.gen_range(-1.0..1.0);
                let c = tint.map(|t| 0.6 * lum + 0.4 * t);
                (rng.gen_range(0.0..ex), rng.gen_range(0.0..ey), r, c)
            })
            .collect();
        let a = rng.gen_range(0.0..std::f64::consts::TAU);
        let f = std::f64::consts::TAU / 0.9;
        Self {
            blobs,
            grating: ([f * a.cos(), f * a.sin()], rng.gen_range(0.0..std::f64::consts::TAU)),
        }
    }

    fn color(&self, x: f64, y: f64, speckle: f64) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for &(bx, by, r, tint) in &self.blobs {
            let d2 = (x - bx).powi(2) + (y - by).powi(2);
            if d2 < 9.0 * r * r {
                c += Vector3::from(tint) * (-0.5 * d2 / (r * r)).exp();
            }
        }
        let (k, ph) = self.grating;
        c.add_scalar_mut(0.15 * (k[0] * x + k[1] * y + ph).sin() + speckle);
        c.map(|v| 0.5 + 0.47 * (1.2 * v).tanh())
    }
}

fn surface_splat(
    center: Vector3<f64>,
    normal: Vector3<f64>,
    sigma: f64,
    color: Vector3<f64>,
    feature: Vec<f64>,
) -> GaussianPrimitive<f64> {
    let q = UnitQuaternion::rotation_between(&Vector3::z(), &normal).unwrap_or_else(UnitQuaternion::identity);
    GaussianPrimitive {
        center,
        rotation: [q.w, q.i, q.j, q.k],
        scale: Vector3::new(sigma, sigma, 0.15 * sigma),
        opacity: 0.95,
        color,
        feature,
    }
}

/// Stand-in ground-truth feature: a fixed random projection of color and
/// position harmonics, so nearby splats with similar appearance get similar features.
fn reference_feature(proj: &[Vec<f64>], center: &Vector3<f64>, color: &Vector3<f64>, scale: f64) -> Vec<f64> {
    let u = std::f64::consts::TAU / scale;
    let basis = [
        color.x - 0.5,
        color.y - 0.5,
        color.z - 0.5,
        (center.x * u).sin(),
        (center.y * u).cos(),
        (center.x * u * 2.3 + center.y * u * 1.7).sin(),
        center.z / scale,
    ];
    proj.iter().map(|row| row.iter().zip(&basis).map(|(a, b)| a * b).sum()).collect()
}

fn build_scene(spec: &SyntheticSceneSpec, rng: &mut ChaCha8Rng) -> FeatureGaussianScene<f64> {
    let [ex, ey, ez] = spec.extent;
    let n = spec.gaussian_count;
    let terrain = Terrain::new(rng, ex, ey, ez);
    let tex = Texture::new(rng, ex, ey);
    let proj: Vec<Vec<f64>> = (0..spec.feature_dim).map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mut scene = FeatureGaussianScene::new(spec.feature_dim);
    scene.unit_note = "synthetic scene units".into();
    let feat = |c: &Vector3<f64>, col: &Vector3<f64>| reference_feature(&proj, c, col, ex.max(ey) / 4.0);
    match spec.profile {
        Profile::Terrain | Profile::Clustered => {
            let (grid_n, blobs) = match spec.profile {
                Profile::Terrain => (n, 0),
                _ => ((n * 3 / 10).max(1), n - (n * 3 / 10).max(1)),
            };
            let nx = ((grid_n as f64 * ex / ey).sqrt().round() as usize).max(1);
            let ny = grid_n.div_ceil(nx);
            let (sx, sy) = (ex / nx as f64, ey / ny as f64);
            let sigma = 0.65 * sx.max(sy);
            for i in 0..grid_n {
                let (gx, gy) = ((i % nx) as f64, (i / nx) as f64);
                let x = (gx + 0.5 + rng.gen_range(-0.3..0.3)) * sx;
                let y = (gy + 0.5 + rng.gen_range(-0.3..0.3)) * sy;
                let c = Vector3::new(x, y, terrain.height(x, y));
                let col = tex.color(x, y, rng.gen_range(-0.05..0.05));
                scene.primitives.push(surface_splat(c, terrain.normal(x, y), sigma, col, feat(&c, &col)));
            }
            if blobs > 0 {
                let centers: Vec<(f64, f64, f64)> = (0..8)
                    .map(|_| (rng.gen_range(0.15..0.85) * ex, rng.gen_range(0.15..0.85) * ey, rng.gen_range(0.04..0.08) * ex.max(ey)))
                    .collect();
                for i in 0..blobs {
                    let (bx, by, br) = centers[i % centers.len()];
                    let r = br * rng.gen_range(0.0f64..1.0).sqrt();
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    let (x, y) = (bx + r * a.cos(), by + r * a.sin());
                    let c = Vector3::new(x, y, terrain.height(x, y) + 0.02 * ez);
                    let col = tex.color(x, y, rng.gen_range(-0.1..0.1));
                    let s = 0.5 * br / ((blobs / centers.len()).max(1) as f64).sqrt() * 1.8;
                    scene.primitives.push(surface_splat(c, terrain.normal(x, y), s, col, feat(&c, &col)));
                }
            }
        }
        Profile::Uniform => {
            let sigma = 0.5 * (ex * ey * ez / n as f64).cbrt();
            for _ in 0..n {
                let c = Vector3::new(rng.gen_range(0.0..ex), rng.gen_range(0.0..ey), rng.gen_range(0.0..ez));
                let col = tex.color(c.x, c.y, rng.gen_range(-0.05..0.05));
                scene.primitives.push(GaussianPrimitive::isotropic(c, sigma, 0.8, col, feat(&c, &col)));
            }
        }
    }
    scene
}

/// Nadir camera at `center` with heading `yaw` and a small tilt `(tx, ty)` in radians.
fn survey_pose(center: Vector3<f64>, yaw: f64, tx: f64, ty: f64) -> Pose<f64> {
    let fwd = Vector3::new(0.0, 0.0, -1.0);
    let right = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let down = fwd.cross(&right);
    let base = Matrix3::from_columns(&[right, down, fwd]);
    let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), tx) * Rotation3::from_axis_angle(&Vector3::y_axis(), ty);
    Pose::from_camera_placement(base * tilt.matrix(), center)
}

/// Renders an image and quantizes it to 8 bits, matching what a PPM round trip yields.
pub fn render_view(scene: &FeatureGaussianScene<f64>, k: &CameraIntrinsics<f64>, pose: &Pose<f64>) -> RgbImage<f64> {
    let mut img = render(scene, k, pose, Channels::RGB).rgb_image();
    for v in img.data.iter_mut() {
        *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    img
}

/// Scene, rendered views, and the train/query split.
///
/// Cameras lie on a jittered survey grid; every query view gets an extra
/// offset so it does not coincide with any grid position, and is redrawn
/// until it sees at least `min_visible` Gaussians.
pub fn synth_scene(spec: &SyntheticSceneSpec) -> Result<SyntheticDataset, EvalError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scene = build_scene(spec, &mut rng);
    let k = spec.intrinsics();
    let [ex, ey, ez] = spec.extent;
    let alt_mid = 0.5 * (spec.altitude[0] + spec.altitude[1]);
    // keep most of each footprint over the scene
    let half_fp = alt_mid * (0.5 * spec.fov_deg.to_radians()).tan();
    let (mx, my) = ((0.6 * half_fp).min(0.45 * ex), (0.6 * half_fp).min(0.45 * ey));
    let v = spec.view_count;
    let gx = ((v as f64 * (ex - 2.0 * mx) / (ey - 2.0 * my).max(1e-9)).sqrt().round() as usize).clamp(1, v);
    let gy = v.div_ceil(gx);
    let (sx, sy) = ((ex - 2.0 * mx) / gx as f64, (ey - 2.0 * my) / gy as f64);
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let nq = spec.query_count();
    let mut order: Vec<usize> = (0..v).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut is_query = vec![false; v];
    for &i in &order[..nq] {
        is_query[i] = true;
    }
    let eps = crate::landmarks::DEFAULT_CONTRIBUTION_EPS;
    let mut poses = Vec::with_capacity(v);
    for i in 0..v {
        let (cx, cy) = ((i % gx) as f64 + 0.5, (i / gx) as f64 + 0.5);
        let mut attempt = 0;
        let pose = loop {
            let mut x = mx + (cx + rng.gen_range(-0.2..0.2)) * sx;
            let mut y = my + (cy + rng.gen_range(-0.2..0.2)) * sy;
            if is_query[i] {
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                x += spec.query_offset * sx * a.cos();
                y += spec.query_offset * sy * a.sin();
            }
            let z = ez + rng.gen_range(spec.altitude[0]..=spec.altitude[1]);
            let yaw = heading + rng.gen_range(-1.0..1.0) * spec.yaw_jitter_deg.to_radians();
            let t = spec.tilt_deg.to_radians();
            let pose = survey_pose(Vector3::new(x, y, z), yaw, rng.gen_range(-t..=t), rng.gen_range(-t..=t));
            let seen = check_visibility(&scene, &k, &pose, eps).indices.len();
            if seen >= spec.min_visible || attempt >= 50 {
                if seen < spec.min_visible {
                    return Err(EvalError::InvalidSpec(format!(
                        "view {i} sees only {seen} Gaussians after {attempt} redraws"
                    )));
                }
                break pose;
            }
            attempt += 1;
        };
        poses.push(pose);
    }
    let views: Vec<SyntheticView> = {
        use rayon::prelude::*;
        poses
            .par_iter()
            .enumerate()
            .map(|(i, pose)| SyntheticView {
                id: format!("{i:04}"),
                pose: *pose,
                image: render_view(&scene, &k, pose),
            })
            .collect()
    };
    let split = Split {
        train: (0..v).filter(|i| !is_query[*i]).map(|i| format!("{i:04}")).collect(),
        query: (0..v).filter(|i| is_query[*i]).map(|i| format!("{i:04}")).collect(),
    };
    Ok(SyntheticDataset {
        scene,
        intrinsics: k,
        views,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(profile: Profile) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            gaussian_count: 600,
            extent: [10.0, 10.0, 1.0],
            profile,
            view_count: 10,
            image_size: [64, 64],
            altitude: [4.0, 5.0],
            fov_deg: 60.0,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = synth_scene(&small(Profile::Terrain)).unwrap();
        let b = synth_scene(&small(Profile::Terrain)).unwrap();
        assert_eq!(a.scene, b.scene);
        assert_eq!(a.split, b.split);
        for (x, y) in a.views.iter().zip(&b.views) {
            assert_eq!(x.pose, y.pose);
            assert_eq!(x.image.data, y.image.data);
        }
        let c = synth_scene(&SyntheticSceneSpec { seed: 1, ..small(Profile::Terrain) }).unwrap();
        assert_ne!(a.scene, c.scene);
    }

    #[test]
    fn split_arithmetic() {
        let spec = SyntheticSceneSpec {
            view_count: 50,
            train_fraction: 0.8,
            ..Default::default()
        };
        assert_eq!(spec.query_count(), 10);
        let d = synth_scene(&SyntheticSceneSpec { view_count: 50, ..small(Profile::Terrain) }).unwrap();
        assert_eq!((d.split.train.len(), d.split.query.len()), (40, 10));
        for q in &d.split.query {
            assert!(!d.split.train.contains(q));
        }
    }

    #[test]
    fn every_query_sees_enough_gaussians() {
        for profile in [Profile::Terrain, Profile::Clustered, Profile::Uniform] {
            let d = synth_scene(&small(profile)).unwrap();
            assert_eq!(d.scene.len(), 600);
            for v in d.query_views() {
                let seen = check_visibility(&d.scene, &d.intrinsics, &v.pose, 1e-6).indices.len();
                assert!(seen >= 100, "{profile:?} {}: {seen}", v.id);
            }
        }
    }

    #[test]
    fn rejects_invalid_specs() {
        assert!(synth_scene(&SyntheticSceneSpec { gaussian_count: 0, ..Default::default() }).is_err());
        assert!(synth_scene(&SyntheticSceneSpec { extent: [1.0, 0.0, 1.0], ..Default::default() }).is_err());
    }

    #[test]
    fn images_are_eight_bit_and_covered() {
        let d = synth_scene(&small(Profile::Terrain)).unwrap();
        let img = &d.views[0].image;
        assert!(img.data.iter().all(|v| ((v * 255.0).round() - v * 255.0).abs() < 1e-9));
        let dark = img.data.chunks(3).filter(|p| p.iter().all(|v| *v < 0.01)).count();
        assert!(dark * 10 < img.width * img.height, "{dark} uncovered pixels");
    }
}
