use super::{DenseFeatureMap, FeatureError};
use crate::image::RgbImage;
use crate::scalar::Scalar;

/// Mean absolute difference over all channels and cells.
pub fn feature_loss<T: Scalar>(rendered: &DenseFeatureMap<T>, target: &DenseFeatureMap<T>) -> Result<T, FeatureError> {
    if !rendered.same_shape(target) {
        return Err(FeatureError::Shape(format!(
            "rendered {}x{}x{} vs target {}x{}x{}",
            rendered.dim, rendered.height, rendered.width, target.dim, target.height, target.width
        )));
    }
    Ok(l1_loss(&rendered.data, &target.data))
}

pub fn l1_loss<T: Scalar>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return T::zero();
    }
    let s = a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + (*x - *y).abs());
    s / T::from_usize_lossy(a.len())
}

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; WINDOW] {
    let mut g = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Separable same-size filtering with zero padding.
fn blur(src: &[f64], w: usize, h: usize, g: &[f64; WINDOW]) -> Vec<f64> {
    let r = (WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let xx = x as isize + k as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    acc += gk * src[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, gk) in g.iter().enumerate() {
                let yy = y as isize + k as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    acc += gk * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Mean SSIM over pixels and channels: 11×11 Gaussian window (σ = 1.5),
/// zero-padded same-size filtering, C1 = 0.01², C2 = 0.03².
pub fn ssim<T: Scalar>(a: &RgbImage<T>, b: &RgbImage<T>) -> Result<T, FeatureError> {
    if a.width != b.width || a.height != b.height {
        return Err(FeatureError::Shape(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h) = (a.width, a.height);
    if w * h == 0 {
        return Ok(T::one());
    }
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(ch).step_by(3).map(|v| v.as_f64()).collect();
        let y: Vec<f64> = b.data.iter().skip(ch).step_by(3).map(|v| v.as_f64()).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur(&x, w, h, &g), blur(&y, w, h, &g));
        let (sxx, syy, sxy) = (blur(&xx, w, h, &g), blur(&yy, w, h, &g), blur(&xy, w, h, &g));
        for i in 0..w * h {
            let (m1, m2) = (mx[i], my[i]);
            let v1 = sxx[i] - m1 * m1;
            let v2 = syy[i] - m2 * m2;
            let cov = sxy[i] - m1 * m2;
            total += ((2.0 * m1 * m2 + c1) * (2.0 * cov + c2)) / ((m1 * m1 + m2 * m2 + c1) * (v1 + v2 + c2));
        }
    }
    Ok(T::lit(total / (3 * w * h) as f64))
}

/// `(1 - λ)·L1 + λ·(1 - SSIM)/2`.
pub fn rgb_loss<T: Scalar>(rendered: &RgbImage<T>, target: &RgbImage<T>, lambda: T) -> Result<T, FeatureError> {
    let s = ssim(rendered, target)?;
    let l1 = l1_loss(&rendered.data, &target.data);
    Ok((T::one() - lambda) * l1 + lambda * (T::one() - s) / T::lit(2.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(w: usize, h: usize, phase: f64) -> RgbImage<f64> {
        RgbImage::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            [
                0.5 + 0.4 * (0.3 * xf + phase).sin() * (0.2 * yf).cos(),
                0.5 + 0.3 * (0.11 * (xf + yf) + 2.0 * phase).cos(),
                ((x * 7 + y * 13) % 17) as f64 / 16.0,
            ]
        })
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let a = pattern(20, 24, 0.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!(rgb_loss(&a, &a, 0.2).unwrap().abs() < 1e-12);
    }

    #[test]
    fn ssim_matches_reference_value() {
        // reference computed with scipy: convolve2d(mode="same", boundary="fill") on the same pattern
        let a = pattern(32, 24, 0.0);
        let b = pattern(32, 24, 0.7);
        let s = ssim(&a, &b).unwrap();
        assert!((s - SSIM_REFERENCE).abs() < 1e-6, "ssim {s}");
    }

    const SSIM_REFERENCE: f64 = 0.7072090652602058;

    #[test]
    fn lambda_endpoints() {
        let a = pattern(32, 24, 0.0);
        let b = pattern(32, 24, 0.7);
        assert_eq!(rgb_loss(&a, &b, 0.0).unwrap(), l1_loss(&a.data, &b.data));
        let dssim = rgb_loss(&a, &b, 1.0).unwrap();
        assert!((dssim - (1.0 - SSIM_REFERENCE) / 2.0).abs() < 1e-6);
    }

    #[test]
    fn feature_loss_matches_elementwise_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut a = DenseFeatureMap::<f64>::zeros(5, 7, 9, 1);
        let mut b = a.clone();
        a.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        b.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        let mut acc = 0.0;
        for c in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    acc += (a.get(c, y, x) - b.get(c, y, x)).abs();
                }
            }
        }
        assert!((feature_loss(&a, &b).unwrap() - acc / 315.0).abs() < 1e-9);
        let shifted = DenseFeatureMap { data: a.data.iter().map(|v| v + 0.5).collect(), ..a.clone() };
        assert!((feature_loss(&shifted, &a).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(feature_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn feature_loss_shape_mismatch_is_an_error() {
        let a = DenseFeatureMap::<f64>::zeros(4, 3, 3, 1);
        let b = DenseFeatureMap::<f64>::zeros(4, 3, 2, 1);
        assert!(matches!(feature_loss(&a, &b), Err(FeatureError::Shape(_))));
    }

    #[test]
    fn feature_loss_is_mean_absolute_difference() {
        let mut a = DenseFeatureMap::<f64>::zeros(2, 1, 2, 1);
        let b = DenseFeatureMap::<f64>::zeros(2, 1, 2, 1);
        a.data = vec![1.0, -1.0, 0.5, 0.0];
        assert_eq!(feature_loss(&a, &b).unwrap(), 0.625);
    }
}
