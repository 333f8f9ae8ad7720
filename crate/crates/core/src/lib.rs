//! Visual relocalization against a 3D Gaussian scene carrying per-primitive features.
//!
//! The pipeline: distill 2D features into the scene, pick well-distributed
//! landmark Gaussians, learn a keypoint detector on the rendered feature maps,
//! estimate an initial pose by sparse matching plus PnP-RANSAC, then refine it
//! by dense feature matching against renders at the current estimate.
//!
//! All numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix `f64`.

pub mod dense;
pub mod detector;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod image;
pub mod landmarks;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod scalar;
pub mod scene;
pub mod sparse;

pub use scalar::Scalar;

pub type Pose = geometry::Pose<f64>;
pub type CameraIntrinsics = geometry::CameraIntrinsics<f64>;
pub type GaussianPrimitive = scene::GaussianPrimitive<f64>;
pub type FeatureGaussianScene = scene::FeatureGaussianScene<f64>;
pub type RenderedPackage = raster::RenderedPackage<f64>;
pub type DenseFeatureMap = features::DenseFeatureMap<f64>;
pub type RgbImage = image::RgbImage<f64>;
