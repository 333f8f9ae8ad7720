//! Rigid poses, the pinhole camera, projection and pose-difference arithmetic.
//!
//! A [`Pose`] always maps world coordinates into the camera frame
//! (`x_cam = R * x_world + t`). File formats carry the `"w2c"` tag so the
//! convention is explicit on disk.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("quaternion norm {norm} is not within 1e-6 of 1")]
    QuaternionNorm { norm: f64 },
    #[error("unsupported pose convention {0:?}, expected \"w2c\"")]
    Convention(String),
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T: Scalar> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Scalar> Pose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_quaternion(q_wxyz: [T; 4], translation: Vector3<T>) -> Result<Self, GeometryError> {
        let q = Quaternion::new(q_wxyz[0], q_wxyz[1], q_wxyz[2], q_wxyz[3]);
        let norm = q.norm().as_f64();
        if !norm.is_finite() || !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("pose"));
        }
        if (norm - 1.0).abs() > 1e-6 {
            return Err(GeometryError::QuaternionNorm { norm });
        }
        let uq = UnitQuaternion::new_normalize(q);
        Ok(Self {
            rotation: uq.to_rotation_matrix().into_inner(),
            translation,
        })
    }

    /// Rotation as a unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion_wxyz(&self) -> [T; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let q = if q.w < T::zero() { -q.into_inner() } else { q.into_inner() };
        [q.w, q.i, q.j, q.k]
    }

    /// Builds a pose from an axis-angle rotation vector and a translation.
    pub fn from_axis_angle(rotvec: Vector3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: Rotation3::new(rotvec).into_inner(),
            translation,
        }
    }

    /// Camera-to-world placement of a camera at `center` whose rotation is `cam_to_world`.
    pub fn from_camera_placement(cam_to_world: Matrix3<T>, center: Vector3<T>) -> Self {
        let rotation = cam_to_world.transpose();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose<T>) -> Pose<T> {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose<T> {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Left perturbation `exp(ξ) · self` with `ξ = (ω, v)`.
    pub fn perturbed(&self, omega: &Vector3<T>, v: &Vector3<T>) -> Pose<T> {
        let r = Rotation3::new(*omega).into_inner();
        Pose {
            rotation: r * self.rotation,
            translation: r * self.translation + v,
        }
    }

    /// Re-orthonormalizes the rotation (nearest rotation via SVD).
    pub fn orthonormalized(&self) -> Pose<T> {
        Pose {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| v.is_finite())
    }

    /// Checks orthonormality and `det(R) = +1` within `tol` per entry.
    pub fn is_valid(&self, tol: f64) -> bool {
        if !self.is_finite() {
            return false;
        }
        let rtr = self.rotation.transpose() * self.rotation - Matrix3::identity();
        let det = self.rotation.determinant().as_f64();
        rtr.iter().all(|v| v.as_f64().abs() <= tol) && (det - 1.0).abs() <= tol
    }

    pub fn cast<U: Scalar>(&self) -> Pose<U> {
        Pose {
            rotation: self.rotation.map(|v| U::lit(v.as_f64())),
            translation: self.translation.map(|v| U::lit(v.as_f64())),
        }
    }
}

pub(crate) fn nearest_rotation<T: Scalar>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Matrix3::identity(),
    };
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * vt
}

/// Pinhole intrinsics. Pixel `(i, j)` is sampled at continuous coordinate `(i, j)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics<T: Scalar> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Scalar> CameraIntrinsics<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if ![self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("intrinsics"));
        }
        if self.fx <= T::zero() || self.fy <= T::zero() {
            return Err(GeometryError::Intrinsics("focal lengths must be positive".into()));
        }
        let (w, h) = (T::from_usize_lossy(self.width), T::from_usize_lossy(self.height));
        if self.cx < T::zero() || self.cx >= w || self.cy < T::zero() || self.cy >= h {
            return Err(GeometryError::Intrinsics(
                "principal point must lie inside the image".into(),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn project(&self, p_cam: &Vector3<T>) -> Vector2<T> {
        Vector2::new(
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }

    /// Camera-frame point at `depth` along the ray through pixel `px`.
    #[inline]
    pub fn back_project(&self, px: &Vector2<T>, depth: T) -> Vector3<T> {
        Vector3::new(
            (px.x - self.cx) / self.fx * depth,
            (px.y - self.cy) / self.fy * depth,
            depth,
        )
    }

    #[inline]
    pub fn in_bounds(&self, px: &Vector2<T>) -> bool {
        px.x >= T::zero()
            && px.x < T::from_usize_lossy(self.width)
            && px.y >= T::zero()
            && px.y < T::from_usize_lossy(self.height)
    }

    /// Intrinsics of the grid obtained by aggregating `stride × stride` pixel cells.
    ///
    /// Cell `c` covers pixels `c·s .. c·s + s - 1`, so its sample point sits at
    /// pixel coordinate `c·s + (s - 1) / 2`.
    pub fn downscaled(&self, stride: usize) -> Self {
        let s = T::from_usize_lossy(stride);
        let half = T::lit((stride as f64 - 1.0) * 0.5);
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx - half) / s,
            cy: (self.cy - half) / s,
            width: self.width / stride,
            height: self.height / stride,
        }
    }

    pub fn cast<U: Scalar>(&self) -> CameraIntrinsics<U> {
        CameraIntrinsics {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// Maps a pixel coordinate of a full-resolution image to its stride cell.
#[inline]
pub fn pixel_to_cell<T: Scalar>(coord: T, stride: usize, cells: usize) -> usize {
    let half = (stride as f64 - 1.0) * 0.5;
    let c = ((coord.as_f64() - half) / stride as f64).round();
    c.clamp(0.0, cells.saturating_sub(1) as f64) as usize
}

/// Pixel coordinate of a stride cell's sample point.
#[inline]
pub fn cell_to_pixel<T: Scalar>(cell: T, stride: usize) -> T {
    cell * T::from_usize_lossy(stride) + T::lit((stride as f64 - 1.0) * 0.5)
}

/// Angular and translational discrepancy between two poses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseDifference<T: Scalar> {
    pub angular_deg: T,
    pub translational: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection<T: Scalar> {
    pub pixels: Vec<Vector2<T>>,
    pub depths: Vec<T>,
    pub in_bounds: Vec<bool>,
}

pub fn project_points<T: Scalar>(
    points: &[Vector3<T>],
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
) -> Projection<T> {
    let mut out = Projection {
        pixels: Vec::with_capacity(points.len()),
        depths: Vec::with_capacity(points.len()),
        in_bounds: Vec::with_capacity(points.len()),
    };
    for p in points {
        let pc = pose.transform(p);
        let px = k.project(&pc);
        out.in_bounds.push(pc.z > T::zero() && k.in_bounds(&px));
        out.pixels.push(px);
        out.depths.push(pc.z);
    }
    out
}

/// Rotation angle (degrees) of `R_a · R_bᵀ` and `‖t_a − t_b‖`.
pub fn pose_difference<T: Scalar>(a: &Pose<T>, b: &Pose<T>) -> PoseDifference<T> {
    let rel = a.rotation * b.rotation.transpose();
    // atan2 keeps precision near 0 and π where acos of the trace does not
    let cos = (rel.trace() - T::one()) * T::lit(0.5);
    let axis = Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)]);
    let sin = axis.norm() * T::lit(0.5);
    PoseDifference {
        angular_deg: sin.atan2(cos) * T::lit(180.0) / T::pi(),
        translational: (a.translation - b.translation).norm(),
    }
}

/// Rotation error in degrees and camera-center distance, as used for evaluation.
pub fn localization_error<T: Scalar>(estimate: &Pose<T>, truth: &Pose<T>) -> PoseDifference<T> {
    let d = pose_difference(estimate, truth);
    PoseDifference {
        angular_deg: d.angular_deg,
        translational: (estimate.center() - truth.center()).norm(),
    }
}

/// On-disk pose record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub q: [f64; 4],
    pub t: [f64; 3],
    pub convention: String,
}

impl<T: Scalar> From<&Pose<T>> for PoseRecord {
    fn from(p: &Pose<T>) -> Self {
        let q = p.quaternion_wxyz();
        PoseRecord {
            q: q.map(|v| v.as_f64()),
            t: [p.translation.x.as_f64(), p.translation.y.as_f64(), p.translation.z.as_f64()],
            convention: "w2c".to_string(),
        }
    }
}

impl PoseRecord {
    pub fn to_pose<T: Scalar>(&self) -> Result<Pose<T>, GeometryError> {
        if self.convention != "w2c" {
            return Err(GeometryError::Convention(self.convention.clone()));
        }
        Pose::from_quaternion(
            self.q.map(T::lit),
            Vector3::new(T::lit(self.t[0]), T::lit(self.t[1]), T::lit(self.t[2])),
        )
    }
}

impl<T: Scalar> Serialize for Pose<T> {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Pose<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rec = PoseRecord::deserialize(d)?;
        rec.to_pose().map_err(serde::de::Error::custom)
    }
}
