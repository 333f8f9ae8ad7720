//! Minimal three-point absolute pose.
//!
//! With depths `s2 = u·s1`, `s3 = v·s1`, the law of cosines on the three
//! point pairs eliminates `s1` and `u`, leaving a quartic in `v`. Each
//! positive real root gives camera-frame points; the pose is the rigid
//! alignment of world to camera points.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::{nearest_rotation, Pose};
use crate::scalar::Scalar;

type Poly<T> = [T; 5];

fn mul<T: Scalar>(a: &Poly<T>, b: &Poly<T>) -> Poly<T> {
    let mut out = [T::zero(); 5];
    for i in 0..5 {
        for j in 0..5 - i {
            out[i + j] += a[i] * b[j];
        }
    }
    out
}

fn eval<T: Scalar>(p: &Poly<T>, x: T) -> T {
    p.iter().rev().fold(T::zero(), |acc, c| acc * x + *c)
}

fn deriv<T: Scalar>(p: &Poly<T>) -> Poly<T> {
    let mut out = [T::zero(); 5];
    for i in 1..5 {
        out[i - 1] = p[i] * T::from_usize_lossy(i);
    }
    out
}

/// Real roots of a polynomial of degree ≤ 4 (coefficients in ascending order).
pub(crate) fn real_roots<T: Scalar>(p: &Poly<T>) -> Vec<T> {
    let scale = p.iter().fold(T::zero(), |m, c| m.max(c.abs()));
    if !(scale > T::zero()) {
        return Vec::new();
    }
    let mut deg = 4;
    while deg > 0 && p[deg].abs() <= scale * T::lit(1e-12) {
        deg -= 1;
    }
    let mut roots = Vec::new();
    match deg {
        0 => {}
        1 => roots.push(-p[0] / p[1]),
        _ => {
            let lead = p[deg];
            // companion matrix of the monic polynomial
            let mut c = nalgebra::DMatrix::<T>::zeros(deg, deg);
            for i in 1..deg {
                c[(i, i - 1)] = T::one();
            }
            for i in 0..deg {
                c[(i, deg - 1)] = -p[i] / lead;
            }
            for z in c.complex_eigenvalues().iter() {
                let mag = (z.re * z.re + z.im * z.im).sqrt().max(T::one());
                if z.im.abs() <= T::lit(1e-6) * mag {
                    roots.push(z.re);
                }
            }
        }
    }
    let dp = deriv(p);
    for r in roots.iter_mut() {
        for _ in 0..8 {
            let d = eval(&dp, *r);
            if d == T::zero() {
                break;
            }
            let step = eval(p, *r) / d;
            *r -= step;
            if step.abs() <= T::default_epsilon() * r.abs().max(T::one()) {
                break;
            }
        }
    }
    roots
}

/// Rigid `(R, t)` with `x_i ≈ R p_i + t`.
pub(crate) fn kabsch<T: Scalar>(world: &[Vector3<T>], cam: &[Vector3<T>]) -> Option<Pose<T>> {
    let n = T::from_usize_lossy(world.len());
    let cw = world.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let cc = cam.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mut h = Matrix3::<T>::zeros();
    for (p, x) in world.iter().zip(cam) {
        h += (p - cw) * (x - cc).transpose();
    }
    // R maximizes tr(R Hᵀ)... equivalently the nearest rotation to Hᵀ
    let r = nearest_rotation(&h.transpose());
    if !r.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(Pose::new(r, cc - r * cw))
}

/// Pixel-free P3P on unit bearing vectors. Returns up to four candidate poses.
pub fn p3p<T: Scalar>(bearings: &[Vector3<T>; 3], world: &[Vector3<T>; 3]) -> Vec<Pose<T>> {
    let [p1, p2, p3] = world;
    let area = (p2 - p1).cross(&(p3 - p1)).norm();
    let span = (p2 - p1).norm_squared().max((p3 - p1).norm_squared());
    if !(area > T::lit(1e-10) * span) {
        return Vec::new();
    }
    let [f1, f2, f3] = bearings;
    let (ca, cb, cg) = (f2.dot(f3), f1.dot(f3), f1.dot(f2));
    let a2 = (p2 - p3).norm_squared();
    let b2 = (p1 - p3).norm_squared();
    let c2 = (p1 - p2).norm_squared();
    let two = T::lit(2.0);
    let z = T::zero();
    // N(v) = b²(1 - v²) + (a² - c²)(1 + v² - 2v cβ); D(v) = 2b²(v cα - cγ); u = -N/D
    let amc = a2 - c2;
    let n: Poly<T> = [b2 + amc, -two * cb * amc, amc - b2, z, z];
    let d: Poly<T> = [-two * b2 * cg, two * b2 * ca, z, z, z];
    let e: Poly<T> = [b2 - c2, two * c2 * cb, -c2, z, z];
    let nn = mul(&n, &n);
    let nd = mul(&n, &d);
    let dd = mul(&d, &d);
    let ed = mul(&e, &dd);
    let mut quartic = [z; 5];
    for i in 0..5 {
        quartic[i] = b2 * nn[i] + two * b2 * cg * nd[i] + ed[i];
    }
    let mut out = Vec::new();
    for v in real_roots(&quartic) {
        if !(v > z) {
            continue;
        }
        let dv = eval(&d, v);
        if dv.abs() <= T::lit(1e-14) * (b2 + T::one()) {
            continue;
        }
        let u = -eval(&n, v) / dv;
        if !(u > z) {
            continue;
        }
        let den = T::one() + u * u - two * u * cg;
        if !(den > z) {
            continue;
        }
        let s1 = (c2 / den).sqrt();
        let cam = [*f1 * s1, *f2 * (u * s1), *f3 * (v * s1)];
        if let Some(pose) = kabsch(world, &cam) {
            if pose.is_finite() {
                out.push(pose);
            }
        }
    }
    out
}

/// Candidate pose of a 4-point sample: the P3P solution that best reprojects the fourth bearing.
pub fn p4p_pick<T: Scalar>(bearings: &[Vector3<T>; 4], world: &[Vector3<T>; 4]) -> Option<Pose<T>> {
    let sols = p3p(&[bearings[0], bearings[1], bearings[2]], &[world[0], world[1], world[2]]);
    let mut best: Option<(T, Pose<T>)> = None;
    for pose in sols {
        let x = pose.transform(&world[3]);
        if !(x.z > T::zero()) {
            continue;
        }
        let err = T::one() - x.normalize().dot(&bearings[3]);
        if best.as_ref().map_or(true, |(e, _)| err < *e) {
            best = Some((err, pose));
        }
    }
    best.map(|(_, p)| p)
}
