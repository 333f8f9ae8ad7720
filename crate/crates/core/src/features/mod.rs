//! Dense 2D feature maps, the built-in extractor, losses and feature-field distillation.

mod grad16;
mod loss;
mod train;

use thiserror::Error;

use crate::image::RgbImage;
use crate::raster::RenderedPackage;
use crate::scalar::Scalar;

pub use grad16::Grad16;
pub use loss::{feature_loss, l1_loss, rgb_loss, ssim};
pub use train::{
    loss_and_gradient, train_feature_field, write_loss_history, FieldGradient, LossRecord, TrainConfig, TrainView,
    TrainingTarget,
};

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("unknown extractor '{0}'")]
    UnknownExtractor(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training views")]
    NoViews,
}

/// Channel-major `D × H′ × W′` feature map sampled every `stride` source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseFeatureMap<T: Scalar> {
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> DenseFeatureMap<T> {
    pub fn zeros(dim: usize, height: usize, width: usize, stride: usize) -> Self {
        Self {
            dim,
            height,
            width,
            stride,
            data: vec![T::zero(); dim * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: T) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of one cell.
    pub fn cell(&self, y: usize, x: usize) -> Vec<T> {
        (0..self.dim).map(|c| self.get(c, y, x)).collect()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.dim == other.dim && self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Feature map of a rendered package; `stride` records the render's sampling.
    pub fn from_rendered(pkg: &RenderedPackage<T>, stride: usize) -> Self {
        assert_eq!(pkg.feature.len(), pkg.feature_dim * pkg.width * pkg.height, "render lacks features");
        Self {
            dim: pkg.feature_dim,
            height: pkg.height,
            width: pkg.width,
            stride,
            data: pkg.feature.clone(),
        }
    }

    /// Bilinear resampling onto an `height × width` grid covering the same image area.
    pub fn resample_bilinear(&self, height: usize, width: usize) -> Self {
        if height == self.height && width == self.width {
            return self.clone();
        }
        let (sy, sx) = (self.height as f64 / height as f64, self.width as f64 / width as f64);
        let stride = ((self.stride as f64) * sx).round().max(1.0) as usize;
        let mut out = Self::zeros(self.dim, height, width, stride);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = T::lit(fy - y0 as f64);
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = T::lit(fx - x0 as f64);
                for c in 0..self.dim {
                    let top = self.get(c, y0, x0) * (T::one() - tx) + self.get(c, y0, x1) * tx;
                    let bot = self.get(c, y1, x0) * (T::one() - tx) + self.get(c, y1, x1) * tx;
                    out.set(c, y, x, top * (T::one() - ty) + bot * ty);
                }
            }
        }
        out
    }

    /// Cell-major copy with every cell L2-normalized (zero cells stay zero).
    pub fn normalized_cells(&self) -> Vec<T> {
        let n = self.cells();
        let mut out = vec![T::zero(); n * self.dim];
        for p in 0..n {
            let mut norm = T::zero();
            for c in 0..self.dim {
                let v = self.data[c * n + p];
                norm += v * v;
            }
            let norm = norm.sqrt();
            if norm > T::zero() {
                for c in 0..self.dim {
                    out[p * self.dim + c] = self.data[c * n + p] / norm;
                }
            }
        }
        out
    }
}

/// A dense feature extractor over RGB images.
pub trait FeatureExtractor<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;
    fn stride(&self) -> usize;
    fn extract(&self, image: &RgbImage<T>) -> DenseFeatureMap<T>;
}

/// Resolves an extractor id: `grad16` (stride 4) or `grad16@<stride>`.
pub fn extractor<T: Scalar>(id: &str) -> Result<Box<dyn FeatureExtractor<T>>, FeatureError> {
    match id.split_once('@') {
        None if id == "grad16" => Ok(Box::new(Grad16::new(4))),
        Some(("grad16", s)) => match s.parse::<usize>() {
            Ok(stride) if stride >= 1 => Ok(Box::new(Grad16::new(stride))),
            _ => Err(FeatureError::UnknownExtractor(id.to_string())),
        },
        _ => Err(FeatureError::UnknownExtractor(id.to_string())),
    }
}

pub fn extract_features<T: Scalar>(image: &RgbImage<T>, extractor_id: &str) -> Result<DenseFeatureMap<T>, FeatureError> {
    Ok(extractor::<T>(extractor_id)?.extract(image))
}

/// Cosine similarity; zero when either vector vanishes.
#[inline]
pub fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (mut dot, mut na, mut nb) = (T::zero(), T::zero(), T::zero());
    for (x, y) in a.iter().zip(b) {
        dot += *x * *y;
        na += *x * *x;
        nb += *y * *y;
    }
    let den = (na * nb).sqrt();
    if den > T::zero() {
        (dot / den).max(-T::one()).min(T::one())
    } else {
        T::zero()
    }
}
