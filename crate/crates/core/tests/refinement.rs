//! Dense refinement on a self-consistent synthetic scene: query features are
//! the scene's own rendered features at the true pose.

use gsreloc::dense::{refine_pose, RefineConfig};
use gsreloc::eval::{synth_scene, SyntheticDataset, SyntheticSceneSpec};
use gsreloc::features::DenseFeatureMap;
use gsreloc::geometry::{localization_error, Pose};
use gsreloc::raster::{render, Channels};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STRIDE: usize = 4;

fn dataset() -> SyntheticDataset {
    synth_scene(&SyntheticSceneSpec { gaussian_count: 3000, view_count: 10, ..Default::default() }).unwrap()
}

fn rendered_query(ds: &SyntheticDataset, pose: &Pose<f64>) -> DenseFeatureMap<f64> {
    let pkg = render(&ds.scene, &ds.intrinsics.downscaled(STRIDE), pose, Channels::FEATURE_DEPTH);
    DenseFeatureMap::from_rendered(&pkg, STRIDE)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn ground_truth_is_a_fixed_point() {
    let ds = dataset();
    let extent = ds.extent();
    for v in ds.views.iter().take(4) {
        let q = rendered_query(&ds, &v.pose);
        let trace = refine_pose(&q, &ds.scene, &ds.intrinsics, &v.pose, &RefineConfig::default()).unwrap();
        assert_eq!(trace.steps.len(), 3, "{:?}", trace.failure);
        for s in &trace.steps {
            let d = localization_error(&s.pose, &v.pose);
            assert!(d.angular_deg < 0.05, "{}: {d:?}", v.id);
            assert!(d.translational < 1e-3 * extent, "{}: {d:?}", v.id);
        }
    }
}

#[test]
fn perturbed_start_moves_toward_truth() {
    let ds = dataset();
    let extent = ds.extent();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut before, mut after) = (Vec::new(), Vec::new());
    for trial in 0..20 {
        let v = &ds.views[trial % ds.views.len()];
        let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let r = Rotation3::from_axis_angle(&axis, 2f64.to_radians()).matrix() * v.pose.rotation;
        let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
        let c = v.pose.center() + dir * 0.01 * extent;
        let init = Pose::new(r, -(r * c));
        let q = rendered_query(&ds, &v.pose);
        let trace = refine_pose(&q, &ds.scene, &ds.intrinsics, &init, &RefineConfig::default()).unwrap();
        let last = trace.last_pose().unwrap_or(init);
        before.push(localization_error(&init, &v.pose).angular_deg);
        after.push(localization_error(&last, &v.pose).angular_deg);
    }
    let (b, a) = (median(before), median(after));
    assert!(a < b, "median AE {b} -> {a}");
}

#[test]
fn single_iteration_gives_a_single_step() {
    let ds = dataset();
    let v = &ds.views[0];
    let q = rendered_query(&ds, &v.pose);
    let cfg = RefineConfig { iterations: 1, ..Default::default() };
    let trace = refine_pose(&q, &ds.scene, &ds.intrinsics, &v.pose, &cfg).unwrap();
    assert_eq!(trace.steps.len(), 1);
    assert!(!gsreloc::dense::verify_consistency(&trace.poses(), 20.0).0.is_reliable());
}
