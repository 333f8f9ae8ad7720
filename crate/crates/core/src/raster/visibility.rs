use nalgebra::Vector2;

use super::{blend_weights, RenderOptions};
use crate::geometry::{project_points, CameraIntrinsics, Pose};
use crate::scalar::Scalar;
use crate::scene::FeatureGaussianScene;

/// Render-visibility of every primitive for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct VisibilityResult<T: Scalar> {
    /// Bounds mask AND contribution mask, one entry per primitive.
    pub visible_mask: Vec<bool>,
    /// Indices of the visible primitives, ascending.
    pub indices: Vec<usize>,
    pub pixels: Vec<Vector2<T>>,
    pub depths: Vec<T>,
    /// Total blend weight per primitive from the same render.
    pub contributions: Vec<T>,
}

impl<T: Scalar> VisibilityResult<T> {
    pub fn count(&self) -> usize {
        self.indices.len()
    }
}

/// A primitive is visible when its center projects inside the image with
/// positive depth and its accumulated blend weight exceeds `contribution_eps`.
pub fn check_visibility<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    k: &CameraIntrinsics<T>,
    pose: &Pose<T>,
    contribution_eps: T,
) -> VisibilityResult<T> {
    let bw = blend_weights(scene, k, pose, &RenderOptions::default());
    let mut contributions = vec![T::zero(); scene.len()];
    for (g, w) in bw.gaussians.iter().zip(&bw.weights) {
        contributions[*g as usize] += *w;
    }
    let proj = project_points(&scene.centers(), pose, k);
    let visible_mask: Vec<bool> = (0..scene.len())
        .map(|i| proj.in_bounds[i] && contributions[i] > contribution_eps)
        .collect();
    let indices: Vec<usize> = (0..scene.len()).filter(|i| visible_mask[*i]).collect();
    VisibilityResult {
        pixels: indices.iter().map(|i| proj.pixels[*i]).collect(),
        depths: indices.iter().map(|i| proj.depths[*i]).collect(),
        visible_mask,
        indices,
        contributions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::total_cmp;
    use crate::scene::GaussianPrimitive;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics<f64> {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    fn iso(c: [f64; 3], sigma: f64, a: f64) -> GaussianPrimitive<f64> {
        GaussianPrimitive::isotropic(Vector3::from(c), sigma, a, Vector3::repeat(0.5), vec![0.0])
    }

    fn scene_of(p: Vec<GaussianPrimitive<f64>>) -> FeatureGaussianScene<f64> {
        let mut s = FeatureGaussianScene::new(1);
        s.primitives = p;
        s
    }

    #[test]
    fn lone_gaussian_is_visible_at_principal_point() {
        let s = scene_of(vec![iso([0.0, 0.0, 5.0], 0.1, 0.8)]);
        let v = check_visibility(&s, &k(), &Pose::identity(), 1e-6);
        assert_eq!(v.indices, vec![0]);
        assert_eq!(v.pixels[0], Vector2::new(50.0, 50.0));
    }

    #[test]
    fn occluded_gaussian_is_not_visible() {
        // two stacked opaque sheets drive transmittance to 1e-6 before the rear splat
        let s = scene_of(vec![
            iso([0.0, 0.0, 8.0], 0.02, 0.9),
            iso([0.0, 0.0, 5.0], 5.0, 0.999),
            iso([0.0, 0.0, 5.01], 5.0, 0.999),
        ]);
        let v = check_visibility(&s, &k(), &Pose::identity(), 1e-6);
        assert!(!v.visible_mask[0]);
        assert!(v.visible_mask[1]);
        assert_eq!(v.contributions[0], 0.0);
    }

    #[test]
    fn out_of_bounds_center_is_excluded() {
        // u = -10 at depth 5
        let s = scene_of(vec![iso([-3.0, 0.0, 5.0], 1.0, 0.9)]);
        let v = check_visibility(&s, &k(), &Pose::identity(), 0.0);
        assert!(v.indices.is_empty());
    }

    /// Per-pixel scan over all Gaussians without tiling, including ones centered off-image.
    fn brute_force_contributions(s: &FeatureGaussianScene<f64>, k: &CameraIntrinsics<f64>) -> Vec<f64> {
        let mut order: Vec<usize> = (0..s.len()).collect();
        let z: Vec<f64> = s.primitives.iter().map(|p| p.center.z).collect();
        order.sort_by(|a, b| total_cmp(&z[*a], &z[*b]).then(a.cmp(b)));
        let mut contrib = vec![0.0; s.len()];
        for py in 0..k.height {
            for px in 0..k.width {
                let mut t = 1.0;
                for &i in &order {
                    let g = &s.primitives[i];
                    let pc = g.center;
                    if pc.z <= 1e-2 {
                        continue;
                    }
                    let m = k.project(&pc);
                    let j = nalgebra::Matrix2x3::new(
                        k.fx / pc.z, 0.0, -k.fx * pc.x / (pc.z * pc.z),
                        0.0, k.fy / pc.z, -k.fy * pc.y / (pc.z * pc.z),
                    );
                    let c2 = j * g.covariance() * j.transpose();
                    let d = Vector2::new(px as f64 - m.x, py as f64 - m.y);
                    let maha = (d.transpose() * c2.try_inverse().unwrap() * d)[0];
                    if maha > 9.0 {
                        continue;
                    }
                    let a = (g.opacity * (-0.5 * maha).exp()).min(1.0);
                    contrib[i] += a * t;
                    t *= 1.0 - a;
                    if t < 1e-4 {
                        break;
                    }
                }
            }
        }
        contrib
    }

    #[test]
    fn agrees_with_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let n = rng.gen_range(5..50);
            let prims = (0..n)
                .map(|_| {
                    iso(
                        [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(2.0..9.0)],
                        rng.gen_range(0.01..0.5),
                        rng.gen_range(0.1..1.0),
                    )
                })
                .collect();
            let s = scene_of(prims);
            let brute = brute_force_contributions(&s, &k());
            let v = check_visibility(&s, &k(), &Pose::identity(), 1e-6);
            let pr = project_points(&s.centers(), &Pose::identity(), &k());
            for i in 0..n {
                assert!((brute[i] - v.contributions[i]).abs() < 1e-9);
                assert_eq!(v.visible_mask[i], pr.in_bounds[i] && brute[i] > 1e-6);
            }
        }
    }
}
