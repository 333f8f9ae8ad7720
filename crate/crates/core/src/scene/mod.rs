//! The feature Gaussian scene: primitive storage, persistence and partitioning.

mod partition;
mod ply;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

pub use partition::{partition_scene, CellId, ScenePartition};
pub use ply::{load_scene, read_scene, save_scene, write_scene};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed PLY header: {0}")]
    Header(String),
    #[error("record {index}: {reason}")]
    InvalidRecord { index: usize, reason: String },
    #[error("record {index}: feature has {found} entries, expected {expected}")]
    FeatureDim {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("file truncated while reading record {index}")]
    Truncated { index: usize },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cell size must be positive in every axis")]
    CellSize,
}

/// One scene element: center, orientation, extent, opacity, color and feature.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive<T: Scalar> {
    pub center: Vector3<T>,
    /// Unit quaternion `[w, x, y, z]`.
    pub rotation: [T; 4],
    /// Per-axis standard deviation in scene units (linear, not log).
    pub scale: Vector3<T>,
    /// Linear opacity in `[0, 1]`.
    pub opacity: T,
    pub color: Vector3<T>,
    pub feature: Vec<T>,
}

impl<T: Scalar> GaussianPrimitive<T> {
    pub fn isotropic(center: Vector3<T>, sigma: T, opacity: T, color: Vector3<T>, feature: Vec<T>) -> Self {
        Self {
            center,
            rotation: [T::one(), T::zero(), T::zero(), T::zero()],
            scale: Vector3::new(sigma, sigma, sigma),
            opacity,
            color,
            feature,
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        let [w, x, y, z] = self.rotation;
        UnitQuaternion::new_normalize(Quaternion::new(w, x, y, z))
            .to_rotation_matrix()
            .into_inner()
    }

    /// World-frame covariance `R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> Matrix3<T> {
        let r = self.rotation_matrix();
        let s2 = Matrix3::from_diagonal(&self.scale.component_mul(&self.scale));
        r * s2 * r.transpose()
    }

    /// Returns the reason this primitive violates an invariant, if any.
    pub fn validate(&self, feature_dim: usize) -> Result<(), String> {
        let finite = self.center.iter().all(|v| v.is_finite())
            && self.rotation.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite())
            && self.opacity.is_finite()
            && self.color.iter().all(|v| v.is_finite())
            && self.feature.iter().all(|v| v.is_finite());
        if !finite {
            return Err("non-finite value".into());
        }
        if self.feature.len() != feature_dim {
            return Err(format!("feature has {} entries, expected {feature_dim}", self.feature.len()));
        }
        let qn = self.rotation.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(format!("quaternion norm {qn} is not unit"));
        }
        if self.scale.iter().any(|v| *v <= T::zero()) {
            return Err("scale must be positive".into());
        }
        if self.opacity < T::zero() || self.opacity > T::one() {
            return Err(format!("opacity {} outside [0, 1]", self.opacity));
        }
        if self.color.iter().any(|v| *v < T::zero() || *v > T::one()) {
            return Err("color outside [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aabb<T: Scalar> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Scalar> Aabb<T> {
    pub fn extent(&self) -> Vector3<T> {
        self.max - self.min
    }

    /// Largest side length.
    pub fn size(&self) -> T {
        self.extent().max()
    }
}

/// The full mapped scene. Primitive indices are stable identifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGaussianScene<T: Scalar> {
    pub primitives: Vec<GaussianPrimitive<T>>,
    pub feature_dim: usize,
    pub unit_note: String,
}

impl<T: Scalar> FeatureGaussianScene<T> {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            primitives: Vec::new(),
            feature_dim,
            unit_note: String::from("scene units"),
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn bounds(&self) -> Option<Aabb<T>> {
        let first = self.primitives.first()?.center;
        let mut b = Aabb { min: first, max: first };
        for p in &self.primitives {
            b.min = b.min.inf(&p.center);
            b.max = b.max.sup(&p.center);
        }
        Some(b)
    }

    pub fn centers(&self) -> Vec<Vector3<T>> {
        self.primitives.iter().map(|p| p.center).collect()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        for (index, p) in self.primitives.iter().enumerate() {
            if p.feature.len() != self.feature_dim {
                return Err(SceneError::FeatureDim {
                    index,
                    expected: self.feature_dim,
                    found: p.feature.len(),
                });
            }
            p.validate(self.feature_dim)
                .map_err(|reason| SceneError::InvalidRecord { index, reason })?;
        }
        Ok(())
    }

    /// Copy of the scene with all feature columns replaced.
    pub fn with_features(&self, features: &[Vec<T>]) -> Self {
        let mut s = self.clone();
        for (p, f) in s.primitives.iter_mut().zip(features) {
            p.feature.clone_from(f);
        }
        s
    }

    pub fn to_json(&self) -> Result<String, SceneError> {
        Ok(serde_json::to_string_pretty(&SceneJson::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self, SceneError> {
        let j: SceneJson = serde_json::from_str(s)?;
        let scene = Self {
            feature_dim: j.feature_dim,
            unit_note: j.unit_note,
            primitives: j
                .primitives
                .into_iter()
                .map(|p| GaussianPrimitive {
                    center: Vector3::from(p.center.map(T::lit)),
                    rotation: p.rotation.map(T::lit),
                    scale: Vector3::from(p.scale.map(T::lit)),
                    opacity: T::lit(p.opacity),
                    color: Vector3::from(p.color.map(T::lit)),
                    feature: p.feature.into_iter().map(T::lit).collect(),
                })
                .collect(),
        };
        scene.validate()?;
        Ok(scene)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureGaussianScene<U> {
        let c = |v: T| U::lit(v.as_f64());
        FeatureGaussianScene {
            feature_dim: self.feature_dim,
            unit_note: self.unit_note.clone(),
            primitives: self
                .primitives
                .iter()
                .map(|p| GaussianPrimitive {
                    center: p.center.map(c),
                    rotation: p.rotation.map(c),
                    scale: p.scale.map(c),
                    opacity: c(p.opacity),
                    color: p.color.map(c),
                    feature: p.feature.iter().map(|v| c(*v)).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PrimitiveJson {
    center: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    feature: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct SceneJson {
    feature_dim: usize,
    unit_note: String,
    primitives: Vec<PrimitiveJson>,
}

impl<T: Scalar> From<&FeatureGaussianScene<T>> for SceneJson {
    fn from(s: &FeatureGaussianScene<T>) -> Self {
        let v3 = |v: &Vector3<T>| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()];
        SceneJson {
            feature_dim: s.feature_dim,
            unit_note: s.unit_note.clone(),
            primitives: s
                .primitives
                .iter()
                .map(|p| PrimitiveJson {
                    center: v3(&p.center),
                    rotation: p.rotation.map(|v| v.as_f64()),
                    scale: v3(&p.scale),
                    opacity: p.opacity.as_f64(),
                    color: v3(&p.color),
                    feature: p.feature.iter().map(|v| v.as_f64()).collect(),
                })
                .collect(),
        }
    }
}
