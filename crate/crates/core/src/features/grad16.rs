use std::f64::consts::PI;

use super::{DenseFeatureMap, FeatureExtractor};
use crate::image::RgbImage;
use crate::scalar::Scalar;

const BINS: usize = 8;
const SCALES: usize = 4;

/// 16-channel hand-crafted descriptor: an 8-bin soft orientation histogram of
/// luminance gradients pooled with a Gaussian window, plus luminance mean and
/// standard deviation over four nested box windows. Every channel is
/// standardized over the image.
#[derive(Debug, Clone, Copy)]
pub struct Grad16 {
    pub stride: usize,
}

impl Grad16 {
    pub fn new(stride: usize) -> Self {
        assert!(stride >= 1);
        Self { stride }
    }

    /// Channels before per-image standardization.
    pub fn extract_raw<T: Scalar>(&self, image: &RgbImage<T>) -> DenseFeatureMap<T> {
        let (w, h, s) = (image.width, image.height, self.stride);
        let (cw, ch) = (w / s, h / s);
        let mut out = DenseFeatureMap::zeros(BINS + 2 * SCALES, ch, cw, s);
        if cw == 0 || ch == 0 {
            return out;
        }
        let lum: Vec<f64> = image.luminance().iter().map(|v| v.as_f64()).collect();
        let at = |x: usize, y: usize| lum[y * w + x];

        // per-pixel soft orientation votes: two bins and their weights
        let mut votes = vec![(0usize, 0.0f64, 0.0f64); w * h];
        for y in 0..h {
            for x in 0..w {
                let gx = 0.5 * (at((x + 1).min(w - 1), y) - at(x.saturating_sub(1), y));
                let gy = 0.5 * (at(x, (y + 1).min(h - 1)) - at(x, y.saturating_sub(1)));
                let mag = (gx * gx + gy * gy).sqrt();
                if mag == 0.0 {
                    continue;
                }
                let mut theta = gy.atan2(gx);
                if theta < 0.0 {
                    theta += 2.0 * PI;
                }
                let pos = theta / (2.0 * PI) * BINS as f64;
                let lo = (pos.floor() as usize) % BINS;
                let frac = pos - pos.floor();
                votes[y * w + x] = (lo, mag * (1.0 - frac), mag * frac);
            }
        }

        let sigma = s as f64;
        let radius = 2.0 * sigma;
        let integral = Integral::new(&lum, w, h);
        let offset = (s as f64 - 1.0) / 2.0;
        for cy in 0..ch {
            let yc = (cy * s) as f64 + offset;
            for cx in 0..cw {
                let xc = (cx * s) as f64 + offset;
                let mut hist = [0.0f64; BINS];
                let (x0, x1) = window(xc, radius, w);
                let (y0, y1) = window(yc, radius, h);
                for y in y0..=y1 {
                    let dy = y as f64 - yc;
                    for x in x0..=x1 {
                        let dx = x as f64 - xc;
                        let g = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                        let (lo, a, b) = votes[y * w + x];
                        hist[lo] += g * a;
                        hist[(lo + 1) % BINS] += g * b;
                    }
                }
                let norm = hist.iter().sum::<f64>() + 1e-6;
                for (b, v) in hist.iter().enumerate() {
                    out.set(b, cy, cx, T::lit(v / norm));
                }
                for k in 0..SCALES {
                    let half = s as f64 * (1 << k) as f64 / 2.0;
                    let (ax, bx) = window(xc, half, w);
                    let (ay, by) = window(yc, half, h);
                    let (mean, var) = integral.stats(ax, bx, ay, by);
                    out.set(BINS + 2 * k, cy, cx, T::lit(mean));
                    out.set(BINS + 2 * k + 1, cy, cx, T::lit(var.max(0.0).sqrt()));
                }
            }
        }
        out
    }
}

/// Inclusive pixel range within `radius` of `center`, clipped to the image.
fn window(center: f64, radius: f64, len: usize) -> (usize, usize) {
    let lo = (center - radius).ceil().max(0.0) as usize;
    let hi = ((center + radius).floor() as usize).min(len - 1);
    (lo, hi)
}

/// Summed-area tables of a map and its square.
struct Integral {
    w: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Integral {
    fn new(v: &[f64], w: usize, h: usize) -> Self {
        let mut sum = vec![0.0; (w + 1) * (h + 1)];
        let mut sq = vec![0.0; (w + 1) * (h + 1)];
        for y in 0..h {
            for x in 0..w {
                let a = v[y * w + x];
                let i = (y + 1) * (w + 1) + x + 1;
                sum[i] = a + sum[i - 1] + sum[i - w - 1] - sum[i - w - 2];
                sq[i] = a * a + sq[i - 1] + sq[i - w - 1] - sq[i - w - 2];
            }
        }
        Self { w, sum, sq }
    }

    fn rect(&self, t: &[f64], x0: usize, x1: usize, y0: usize, y1: usize) -> f64 {
        let s = self.w + 1;
        t[(y1 + 1) * s + x1 + 1] - t[y0 * s + x1 + 1] - t[(y1 + 1) * s + x0] + t[y0 * s + x0]
    }

    fn stats(&self, x0: usize, x1: usize, y0: usize, y1: usize) -> (f64, f64) {
        let n = ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64;
        let mean = self.rect(&self.sum, x0, x1, y0, y1) / n;
        let var = self.rect(&self.sq, x0, x1, y0, y1) / n - mean * mean;
        // cancellation noise on flat windows
        (mean, if var < 1e-12 { 0.0 } else { var })
    }
}

impl<T: Scalar> FeatureExtractor<T> for Grad16 {
    fn dim(&self) -> usize {
        BINS + 2 * SCALES
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn extract(&self, image: &RgbImage<T>) -> DenseFeatureMap<T> {
        let mut map = self.extract_raw(image);
        let n = map.cells();
        if n == 0 {
            return map;
        }
        for c in 0..map.dim {
            let ch = &mut map.data[c * n..(c + 1) * n];
            let mean = ch.iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            let var = ch.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / n as f64;
            let std = var.sqrt();
            let scale = if std > 1e-6 { 1.0 / std } else { 1.0 };
            for v in ch.iter_mut() {
                *v = T::lit((v.as_f64() - mean) * scale);
            }
        }
        map
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(w: usize, h: usize) -> RgbImage<f64> {
        RgbImage::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let v = 0.5 + 0.25 * (0.31 * xf + 0.05 * yf * yf / 10.0).sin() + 0.2 * (0.17 * yf - 0.07 * xf).cos();
            [v, (v * 0.8 + 0.1).min(1.0), 1.0 - v]
        })
    }

    #[test]
    fn constant_image_has_empty_histogram_and_flat_stats() {
        let img = RgbImage::<f64>::from_fn(32, 32, |_, _| [0.4, 0.4, 0.4]);
        let raw = Grad16::new(4).extract_raw(&img);
        for c in 0..BINS {
            assert!((0..raw.cells()).all(|p| raw.data[c * raw.cells() + p] == 0.0));
        }
        for k in 0..SCALES {
            let n = raw.cells();
            assert!(raw.data[(BINS + 2 * k) * n..(BINS + 2 * k + 1) * n]
                .iter()
                .all(|v| (v - 0.4).abs() < 1e-12));
            assert!(raw.data[(BINS + 2 * k + 1) * n..(BINS + 2 * k + 2) * n].iter().all(|v| v.abs() < 1e-6));
        }
        let f = Grad16::new(4).extract(&img);
        assert!(f.data.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn quarter_turn_shifts_orientation_bins_by_two() {
        let img = textured(48, 48);
        let g = Grad16::new(4);
        let a = g.extract_raw(&img);
        let b = g.extract_raw(&img.rotate90());
        let cw = a.width;
        for y in 0..a.height {
            for x in 0..cw {
                // cell (x, y) lands at (y, W' - 1 - x)
                let (xn, yn) = (y, cw - 1 - x);
                for k in 0..BINS {
                    let old = a.get((k + 2) % BINS, y, x);
                    let new = b.get(k, yn, xn);
                    assert!((old - new).abs() < 1e-9, "bin {k} at ({x},{y}): {old} vs {new}");
                }
                for c in BINS..BINS + 2 * SCALES {
                    assert!((a.get(c, y, x) - b.get(c, yn, xn)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_edge_votes_into_expected_bin() {
        // luminance increases with x: gradient direction 0 rad, bin 0
        let img = RgbImage::<f64>::from_fn(16, 16, |x, _| [x as f64 / 16.0; 3]);
        let raw = Grad16::new(4).extract_raw(&img);
        let h = raw.cell(1, 1);
        assert!(h[0] > 0.99);
        assert!(h[1..BINS].iter().all(|v| *v < 1e-9));
    }

    #[test]
    fn standardized_channels_have_zero_mean_unit_variance() {
        let f = Grad16::new(2).extract(&textured(64, 64));
        let n = f.cells() as f64;
        for c in 0..f.dim {
            let ch = &f.data[c * f.cells()..(c + 1) * f.cells()];
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }
}
