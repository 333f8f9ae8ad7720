use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{extractor, rgb_loss, DenseFeatureMap, FeatureError};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::image::RgbImage;
use crate::optim::{Adam, LrSchedule};
use crate::raster::{blend_weights, RenderOptions};
use crate::scalar::Scalar;
use crate::scene::FeatureGaussianScene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Views per iteration; 0 uses all views.
    pub batch_views: usize,
    pub schedule: LrSchedule,
    /// Also fit colors against the L1 color term.
    pub train_color: bool,
    pub extractor: String,
    /// Render stride relative to the view intrinsics; defaults to the target feature stride.
    pub render_stride: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.2,
            iterations: 500,
            learning_rate: 0.01,
            batch_views: 4,
            schedule: LrSchedule::Cosine,
            train_color: false,
            extractor: "grad16".into(),
            render_stride: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("learning_rate", self.learning_rate)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(FeatureError::Config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(FeatureError::Config("lambda must lie in [0, 1]".into()));
        }
        if self.render_stride == Some(0) {
            return Err(FeatureError::Config("render_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Where a view's supervision comes from.
#[derive(Debug, Clone)]
pub enum TrainingTarget<T: Scalar> {
    /// Features are extracted with the configured extractor; the image also supervises color.
    Image(RgbImage<T>),
    /// Precomputed target features, optionally with a color target at render resolution.
    Features {
        map: DenseFeatureMap<T>,
        rgb: Option<RgbImage<T>>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainView<T: Scalar> {
    pub pose: Pose<T>,
    /// Intrinsics of the source image.
    pub intrinsics: CameraIntrinsics<T>,
    pub target: TrainingTarget<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub feature: f64,
    /// Color loss, when color targets exist.
    pub rgb: Option<f64>,
    pub total: f64,
}

pub fn write_loss_history(records: &[LossRecord], w: &mut impl Write) -> io::Result<()> {
    writeln!(w, "iteration,L_f,L_rgb,L")?;
    for r in records {
        let rgb = r.rgb.map(|v| v.to_string()).unwrap_or_default();
        writeln!(w, "{},{},{},{}", r.iteration, r.feature, rgb, r.total)?;
    }
    Ok(())
}

/// Gradients of the training objective with respect to the `G × D` features and `G × 3` colors.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGradient<T: Scalar> {
    pub features: Vec<T>,
    pub colors: Vec<T>,
}

struct ViewCache<T: Scalar> {
    n: usize,
    offsets: Vec<usize>,
    gaussians: Vec<u32>,
    weights: Vec<T>,
    target: Vec<T>,
    rgb: Option<Vec<T>>,
    rgb_size: (usize, usize),
}

fn box_downsample<T: Scalar>(img: &RgbImage<T>, s: usize) -> RgbImage<T> {
    if s == 1 {
        return img.clone();
    }
    let inv = T::lit(1.0 / (s * s) as f64);
    RgbImage::from_fn(img.width / s, img.height / s, |x, y| {
        let mut acc = [T::zero(); 3];
        for dy in 0..s {
            for dx in 0..s {
                let p = img.get(x * s + dx, y * s + dy);
                for c in 0..3 {
                    acc[c] += p[c];
                }
            }
        }
        acc.map(|v| v * inv)
    })
}

fn prepare<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    views: &[TrainView<T>],
    config: &TrainConfig,
) -> Result<Vec<ViewCache<T>>, FeatureError> {
    config.validate()?;
    if views.is_empty() {
        return Err(FeatureError::NoViews);
    }
    let ext = match views.iter().any(|v| matches!(v.target, TrainingTarget::Image(_))) {
        true => Some(extractor::<T>(&config.extractor)?),
        false => None,
    };
    views
        .par_iter()
        .map(|view| {
            let (map, image) = match &view.target {
                TrainingTarget::Image(img) => {
                    let e = ext.as_ref().expect("extractor resolved");
                    (e.extract(img), Some(img))
                }
                TrainingTarget::Features { map, .. } => (map.clone(), None),
            };
            if map.dim != scene.feature_dim {
                return Err(FeatureError::Shape(format!(
                    "target has {} channels, scene has {}",
                    map.dim, scene.feature_dim
                )));
            }
            let stride = config.render_stride.unwrap_or(map.stride);
            let k = view.intrinsics.downscaled(stride);
            let (w, h) = (k.width, k.height);
            let map = map.resample_bilinear(h, w);
            let rgb = match (&view.target, image) {
                (_, Some(img)) => Some(box_downsample(img, stride)),
                (TrainingTarget::Features { rgb, .. }, None) => rgb.clone(),
                _ => None,
            };
            if let Some(r) = &rgb {
                if r.width != w || r.height != h {
                    return Err(FeatureError::Shape(format!(
                        "color target {}x{} vs render {}x{}",
                        r.width, r.height, w, h
                    )));
                }
            }
            let bw = blend_weights(scene, &k, &view.pose, &RenderOptions::default());
            Ok(ViewCache {
                n: w * h,
                offsets: bw.offsets,
                gaussians: bw.gaussians,
                weights: bw.weights,
                target: map.data,
                rgb: rgb.map(|r| r.data),
                rgb_size: (w, h),
            })
        })
        .collect()
}

struct ViewEval<T: Scalar> {
    feature_loss: T,
    rgb_loss: Option<T>,
    grad_f: Vec<T>,
    grad_c: Vec<T>,
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn eval_view<T: Scalar>(
    v: &ViewCache<T>,
    features: &[T],
    colors: &[T],
    d: usize,
    config: &TrainConfig,
    color_grad: bool,
) -> ViewEval<T> {
    let g_count = colors.len() / 3;
    let mut grad_f = vec![T::zero(); g_count * d];
    let mut grad_c = if color_grad { vec![T::zero(); g_count * 3] } else { Vec::new() };
    let inv_f = T::one() / T::from_usize_lossy(v.n * d);
    let inv_c = T::one() / T::from_usize_lossy(v.n * 3);
    let mut abs_sum = T::zero();
    let mut rendered_rgb = v.rgb.as_ref().map(|_| vec![T::zero(); v.n * 3]);
    let mut f = vec![T::zero(); d];
    let mut s = vec![T::zero(); d];
    for p in 0..v.n {
        let r = v.offsets[p]..v.offsets[p + 1];
        f.iter_mut().for_each(|x| *x = T::zero());
        let mut rgb = [T::zero(); 3];
        for e in r.clone() {
            let g = v.gaussians[e] as usize;
            let w = v.weights[e];
            for c in 0..d {
                f[c] += w * features[g * d + c];
            }
            for c in 0..3 {
                rgb[c] += w * colors[g * 3 + c];
            }
        }
        for c in 0..d {
            let diff = f[c] - v.target[c * v.n + p];
            abs_sum += diff.abs();
            s[c] = sign(diff) * inv_f;
        }
        let mut sc = [T::zero(); 3];
        if let (Some(out), Some(tgt)) = (rendered_rgb.as_mut(), v.rgb.as_ref()) {
            for c in 0..3 {
                out[p * 3 + c] = rgb[c];
                sc[c] = sign(rgb[c] - tgt[p * 3 + c]) * inv_c;
            }
        }
        for e in r {
            let g = v.gaussians[e] as usize;
            let w = v.weights[e];
            for c in 0..d {
                grad_f[g * d + c] += w * s[c];
            }
            if color_grad {
                for c in 0..3 {
                    grad_c[g * 3 + c] += w * sc[c];
                }
            }
        }
    }
    let rgb_loss = match (rendered_rgb, v.rgb.as_ref()) {
        (Some(out), Some(tgt)) => {
            let (w, h) = v.rgb_size;
            let a = RgbImage { width: w, height: h, data: out };
            let b = RgbImage { width: w, height: h, data: tgt.clone() };
            Some(rgb_loss(&a, &b, T::lit(config.lambda)).expect("shapes checked"))
        }
        _ => None,
    };
    ViewEval {
        feature_loss: abs_sum * inv_f,
        rgb_loss,
        grad_f,
        grad_c,
    }
}

struct BatchEval<T: Scalar> {
    feature: T,
    rgb: Option<T>,
    grad: FieldGradient<T>,
}

fn eval_batch<T: Scalar>(
    caches: &[ViewCache<T>],
    batch: &[usize],
    features: &[T],
    colors: &[T],
    d: usize,
    config: &TrainConfig,
) -> BatchEval<T> {
    let color_grad = config.train_color;
    let evals: Vec<ViewEval<T>> = batch
        .par_iter()
        .map(|&i| eval_view(&caches[i], features, colors, d, config, color_grad))
        .collect();
    let inv_b = T::one() / T::from_usize_lossy(batch.len());
    let (alpha, cw) = (T::lit(config.alpha), T::lit(config.beta * (1.0 - config.lambda)));
    let mut grad = FieldGradient {
        features: vec![T::zero(); features.len()],
        colors: vec![T::zero(); colors.len()],
    };
    let (mut lf, mut lrgb, mut has_rgb) = (T::zero(), T::zero(), false);
    // deterministic reduction in batch order
    for e in &evals {
        lf += e.feature_loss * inv_b;
        if let Some(r) = e.rgb_loss {
            lrgb += r * inv_b;
            has_rgb = true;
        }
        for (g, v) in grad.features.iter_mut().zip(&e.grad_f) {
            *g += alpha * inv_b * *v;
        }
        if color_grad {
            for (g, v) in grad.colors.iter_mut().zip(&e.grad_c) {
                *g += cw * inv_b * *v;
            }
        }
    }
    BatchEval {
        feature: lf,
        rgb: has_rgb.then_some(lrgb),
        grad,
    }
}

fn flatten<T: Scalar>(scene: &FeatureGaussianScene<T>) -> (Vec<T>, Vec<T>) {
    let features = scene.primitives.iter().flat_map(|p| p.feature.iter().copied()).collect();
    let colors = scene.primitives.iter().flat_map(|p| p.color.iter().copied()).collect();
    (features, colors)
}

/// Training objective over all views and its gradient.
///
/// The objective is `α·L_f`, plus `β(1-λ)·L1` on color when color training is
/// enabled; the gradient is exact wherever no residual is zero.
pub fn loss_and_gradient<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    views: &[TrainView<T>],
    config: &TrainConfig,
) -> Result<(T, FieldGradient<T>), FeatureError> {
    let caches = prepare(scene, views, config)?;
    let (features, colors) = flatten(scene);
    let all: Vec<usize> = (0..caches.len()).collect();
    let e = eval_batch(&caches, &all, &features, &colors, scene.feature_dim, config);
    let mut loss = T::lit(config.alpha) * e.feature;
    if config.train_color {
        // the differentiated color term is the L1 part only
        let l1: T = caches
            .iter()
            .map(|c| {
                let v = eval_view(c, &features, &colors, scene.feature_dim, &TrainConfig { lambda: 0.0, ..config.clone() }, false);
                v.rgb_loss.unwrap_or(T::zero())
            })
            .fold(T::zero(), |a, b| a + b)
            / T::from_usize_lossy(caches.len());
        loss += T::lit(config.beta * (1.0 - config.lambda)) * l1;
    }
    Ok((loss, e.grad))
}

/// Fits per-Gaussian features (and optionally colors) with geometry frozen.
pub fn train_feature_field<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    views: &[TrainView<T>],
    config: &TrainConfig,
) -> Result<(FeatureGaussianScene<T>, Vec<LossRecord>), FeatureError> {
    let caches = prepare(scene, views, config)?;
    let d = scene.feature_dim;
    let (mut features, mut colors) = flatten(scene);
    let mut opt_f = Adam::<T>::new(features.len());
    let mut opt_c = Adam::<T>::new(colors.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch = match config.batch_views {
        0 => caches.len(),
        b => b.min(caches.len()),
    };
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        if order.len() < batch {
            let mut fresh: Vec<usize> = (0..caches.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let picked: Vec<usize> = order.drain(..batch).collect();
        let e = eval_batch(&caches, &picked, &features, &colors, d, config);
        let feature = e.feature.as_f64();
        let rgb = e.rgb.map(|v| v.as_f64());
        let total = config.alpha * feature + config.beta * rgb.unwrap_or(0.0);
        if !total.is_finite() {
            return Err(FeatureError::NonFiniteLoss { iteration: it });
        }
        history.push(LossRecord {
            iteration: it,
            feature,
            rgb,
            total,
        });
        let lr = config.schedule.rate(config.learning_rate, it, config.iterations);
        opt_f.update(&mut features, &e.grad.features, lr);
        if config.train_color {
            opt_c.update(&mut colors, &e.grad.colors, lr);
            colors.iter_mut().for_each(|c| *c = c.max(T::zero()).min(T::one()));
        }
    }
    let mut out = scene.clone();
    for (i, p) in out.primitives.iter_mut().enumerate() {
        p.feature.copy_from_slice(&features[i * d..(i + 1) * d]);
        if config.train_color {
            for c in 0..3 {
                p.color[c] = colors[i * 3 + c];
            }
        }
    }
    Ok((out, history))
}
