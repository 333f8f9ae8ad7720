//! Tile-parallel CPU rasterization of Gaussian scenes.
//!
//! Every pixel blends the Gaussians overlapping it front to back:
//! `w_i = α_i G_i(p) Π_{j<i} (1 - α_j G_j(p))`. Footprints come from the
//! local-affine projection of each 3D covariance and are truncated at 3σ;
//! blending stops once transmittance drops below `1e-4`. Only primitives whose
//! center projects inside the image with positive depth take part.
//!
//! The per-pixel weight lists are assembled in row-major order, so every output
//! (including per-Gaussian contribution sums) is bit-identical whatever the tile
//! size or thread count.

mod visibility;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use rayon::prelude::*;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::scalar::{total_cmp, Scalar};
use crate::scene::FeatureGaussianScene;

pub use visibility::{check_visibility, VisibilityResult};

/// Which maps `render` fills. Unselected maps are left empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub rgb: bool,
    pub depth: bool,
    pub feature: bool,
}

impl Channels {
    pub const ALL: Channels = Channels {
        rgb: true,
        depth: true,
        feature: true,
    };
    pub const RGB: Channels = Channels {
        rgb: true,
        depth: false,
        feature: false,
    };
    pub const GEOMETRY: Channels = Channels {
        rgb: false,
        depth: true,
        feature: false,
    };
    pub const FEATURE_DEPTH: Channels = Channels {
        rgb: false,
        depth: true,
        feature: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub tile_size: usize,
    pub transmittance_cutoff: f64,
    pub truncation_sigma: f64,
    /// Minimum camera-frame depth for a primitive to be rasterized.
    pub near: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            transmittance_cutoff: 1e-4,
            truncation_sigma: 3.0,
            near: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat<T: Scalar> {
    pub index: u32,
    pub mean: Vector2<T>,
    pub depth: T,
    /// Inverse 2D covariance stored as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [T; 3],
    pub opacity: T,
    pub radius: T,
}

pub(crate) struct Projected<T: Scalar> {
    /// In front-to-back order, ties broken by index.
    pub splats: Vec<Splat<T>>,
    pub degenerate: usize,
}

pub(crate) fn project_splats<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    opts: &RenderOptions,
) -> Projected<T> {
    let near = T::lit(opts.near);
    let trunc = T::lit(opts.truncation_sigma);
    let mut degenerate = 0;
    let mut splats = Vec::new();
    for (i, g) in scene.primitives.iter().enumerate() {
        let pc = pose.transform(&g.center);
        if !(pc.z > near) {
            continue;
        }
        let mean = k.project(&pc);
        let cov_cam = pose.rotation * g.covariance() * pose.rotation.transpose();
        let iz = T::one() / pc.z;
        let j = Matrix2x3::new(
            k.fx * iz,
            T::zero(),
            -k.fx * pc.x * iz * iz,
            T::zero(),
            k.fy * iz,
            -k.fy * pc.y * iz * iz,
        );
        let cov2: Matrix2<T> = j * cov_cam * j.transpose();
        let det = cov2.determinant();
        let tr = cov2.trace();
        if !(det > T::lit(1e-12) * (T::one() + tr * tr)) || !det.is_finite() || !(g.opacity > T::zero()) {
            if g.opacity > T::zero() {
                degenerate += 1;
            }
            continue;
        }
        let inv = T::one() / det;
        let conic = [cov2[(1, 1)] * inv, -cov2[(0, 1)] * inv, cov2[(0, 0)] * inv];
        let half = tr * T::lit(0.5);
        let lambda_max = half + (half * half - det).max(T::zero()).sqrt();
        splats.push(Splat {
            index: i as u32,
            mean,
            depth: pc.z,
            conic,
            opacity: g.opacity,
            radius: trunc * lambda_max.sqrt(),
        });
    }
    splats.sort_by(|a, b| total_cmp(&a.depth, &b.depth).then(a.index.cmp(&b.index)));
    Projected { splats, degenerate }
}

/// Sparse per-pixel blend weights in row-major pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights<T: Scalar> {
    pub width: usize,
    pub height: usize,
    /// `offsets[p]..offsets[p + 1]` indexes the entries of pixel `p`.
    pub offsets: Vec<usize>,
    pub gaussians: Vec<u32>,
    pub weights: Vec<T>,
    /// Camera-frame depth of each entry's Gaussian.
    pub depths: Vec<T>,
    pub skipped_degenerate: usize,
}

impl<T: Scalar> BlendWeights<T> {
    pub fn pixel(&self, p: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[p]..self.offsets[p + 1];
        self.gaussians[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(g, w)| (*g as usize, *w))
    }

    pub fn nnz(&self) -> usize {
        self.weights.len()
    }
}

struct TileOut<T> {
    x0: usize,
    y0: usize,
    w: usize,
    counts: Vec<usize>,
    entries: Vec<(u32, T, T)>,
}

/// Computes every pixel's blend weight list.
pub fn blend_weights<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    opts: &RenderOptions,
) -> BlendWeights<T> {
    let (width, height) = (k.width, k.height);
    let proj = project_splats(scene, k, pose, opts);
    let ts = opts.tile_size.max(1);
    let (tx, ty) = (width.div_ceil(ts), height.div_ceil(ts));
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
    for (si, s) in proj.splats.iter().enumerate() {
        let lo = |c: T| (c.as_f64().floor().max(0.0)) as usize;
        let hi = |c: T, n: usize| (c.as_f64().ceil().max(0.0) as usize).min(n.saturating_sub(1));
        let (x0, x1) = (lo(s.mean.x - s.radius), hi(s.mean.x + s.radius, width));
        let (y0, y1) = (lo(s.mean.y - s.radius), hi(s.mean.y + s.radius, height));
        let off = |c: T| c < T::zero();
        if x0 > x1 || y0 > y1 || off(s.mean.x + s.radius) || off(s.mean.y + s.radius) {
            continue;
        }
        for by in y0 / ts..=y1 / ts {
            for bx in x0 / ts..=x1 / ts {
                bins[by * tx + bx].push(si as u32);
            }
        }
    }
    let cutoff = T::lit(opts.transmittance_cutoff);
    let trunc2 = T::lit(opts.truncation_sigma * opts.truncation_sigma);
    let half = T::lit(0.5);
    let tiles: Vec<TileOut<T>> = (0..tx * ty)
        .into_par_iter()
        .map(|t| {
            let (x0, y0) = ((t % tx) * ts, (t / tx) * ts);
            let (x1, y1) = ((x0 + ts).min(width), (y0 + ts).min(height));
            let w = x1 - x0;
            let mut counts = Vec::with_capacity(w * (y1 - y0));
            let mut entries = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (T::from_usize_lossy(x), T::from_usize_lossy(y));
                    let before = entries.len();
                    let mut trans = T::one();
                    for &si in &bins[t] {
                        let s = &proj.splats[si as usize];
                        let (dx, dy) = (px - s.mean.x, py - s.mean.y);
                        let maha = s.conic[0] * dx * dx + T::lit(2.0) * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if maha > trunc2 {
                            continue;
                        }
                        let alpha = (s.opacity * (-half * maha).exp()).min(T::one());
                        if !(alpha > T::zero()) {
                            continue;
                        }
                        entries.push((s.index, alpha * trans, s.depth));
                        trans *= T::one() - alpha;
                        if trans < cutoff {
                            break;
                        }
                    }
                    counts.push(entries.len() - before);
                }
            }
            TileOut {
                x0,
                y0,
                w,
                counts,
                entries,
            }
        })
        .collect();

    let mut per_pixel = vec![0usize; width * height];
    for tile in &tiles {
        for (i, c) in tile.counts.iter().enumerate() {
            per_pixel[(tile.y0 + i / tile.w) * width + tile.x0 + i % tile.w] = *c;
        }
    }
    let mut offsets = Vec::with_capacity(width * height + 1);
    offsets.push(0);
    for c in &per_pixel {
        offsets.push(offsets.last().unwrap() + c);
    }
    let nnz = *offsets.last().unwrap();
    let mut gaussians = vec![0u32; nnz];
    let mut weights = vec![T::zero(); nnz];
    let mut depths = vec![T::zero(); nnz];
    for tile in &tiles {
        let mut src = 0;
        for (i, c) in tile.counts.iter().enumerate() {
            let p = (tile.y0 + i / tile.w) * width + tile.x0 + i % tile.w;
            let dst = offsets[p];
            for (j, e) in tile.entries[src..src + c].iter().enumerate() {
                gaussians[dst + j] = e.0;
                weights[dst + j] = e.1;
                depths[dst + j] = e.2;
            }
            src += c;
        }
    }
    BlendWeights {
        width,
        height,
        offsets,
        gaussians,
        weights,
        depths,
        skipped_degenerate: proj.degenerate,
    }
}

/// Per-view rasterization output. Maps are row-major; features are channel-major `D × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPackage<T: Scalar> {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub rgb: Vec<T>,
    /// Weight-blended camera depth, zero where nothing rendered.
    pub depth: Vec<T>,
    pub feature: Vec<T>,
    pub accum_alpha: Vec<T>,
    /// Total blend weight of each Gaussian over the image.
    pub contributions: Vec<T>,
    pub skipped_degenerate: usize,
}

impl<T: Scalar> RenderedPackage<T> {
    /// Blended depth divided by coverage, or `None` where coverage is below `min_alpha`.
    pub fn normalized_depth(&self, p: usize, min_alpha: T) -> Option<T> {
        let a = self.accum_alpha[p];
        if a < min_alpha || !(a > T::zero()) {
            None
        } else {
            Some(self.depth[p] / a)
        }
    }

    pub fn rgb_image(&self) -> crate::image::RgbImage<T> {
        crate::image::RgbImage {
            width: self.width,
            height: self.height,
            data: self.rgb.clone(),
        }
    }
}

pub fn render<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    channels: Channels,
) -> RenderedPackage<T> {
    render_with(scene, k, pose, channels, &RenderOptions::default())
}

pub fn render_with<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    channels: Channels,
    opts: &RenderOptions,
) -> RenderedPackage<T> {
    let bw = blend_weights(scene, k, pose, opts);
    let mut out = composite(scene, &bw, channels);
    // off-image primitives still shade border pixels but are not counted as seen
    let proj = crate::geometry::project_points(&scene.centers(), pose, k);
    for (c, inside) in out.contributions.iter_mut().zip(&proj.in_bounds) {
        if !inside {
            *c = T::zero();
        }
    }
    out
}

/// Applies precomputed blend weights to the scene's attributes.
pub fn composite<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    bw: &BlendWeights<T>,
    channels: Channels,
) -> RenderedPackage<T> {
    let n = bw.width * bw.height;
    let d = scene.feature_dim;
    let mut out = RenderedPackage {
        width: bw.width,
        height: bw.height,
        feature_dim: d,
        rgb: if channels.rgb { vec![T::zero(); n * 3] } else { Vec::new() },
        depth: if channels.depth { vec![T::zero(); n] } else { Vec::new() },
        feature: if channels.feature { vec![T::zero(); n * d] } else { Vec::new() },
        accum_alpha: vec![T::zero(); n],
        contributions: vec![T::zero(); scene.len()],
        skipped_degenerate: bw.skipped_degenerate,
    };
    for p in 0..n {
        let mut acc = T::zero();
        for e in bw.offsets[p]..bw.offsets[p + 1] {
            let g = bw.gaussians[e] as usize;
            let w = bw.weights[e];
            let prim = &scene.primitives[g];
            acc += w;
            out.contributions[g] += w;
            if channels.rgb {
                for c in 0..3 {
                    out.rgb[p * 3 + c] += w * prim.color[c];
                }
            }
            if channels.depth {
                out.depth[p] += w * bw.depths[e];
            }
            if channels.feature {
                for (c, f) in prim.feature.iter().enumerate() {
                    out.feature[c * n + p] += w * *f;
                }
            }
        }
        out.accum_alpha[p] = acc;
    }
    out
}
