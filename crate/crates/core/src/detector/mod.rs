//! Scene-specific landmark detector over dense feature maps, with NMS keypoint extraction.

mod net;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector2;
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::DenseFeatureMap;
use crate::geometry::{cell_to_pixel, pixel_to_cell, CameraIntrinsics, Pose};
use crate::landmarks::LandmarkSet;
use crate::optim::{Adam, LrSchedule};
use crate::raster::check_visibility;
use crate::scalar::{total_cmp, Scalar};
use crate::scene::FeatureGaussianScene;

pub use net::CellSample;
use net::{cells_loss_grad, forward_full, sigmoid, Mats};

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("no training samples")]
    NoSamples,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

/// Weights of `conv3×3(D→H) → ReLU → conv3×3(H→H) → ReLU → conv1×1(H→1) → sigmoid`.
///
/// Convolution weights are row-major `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams<T: Scalar> {
    pub in_dim: usize,
    pub hidden: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: T,
}

pub const DEFAULT_HIDDEN: usize = 64;

impl<T: Scalar> DetectorParams<T> {
    /// He-uniform initialization.
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |n: usize, fan_in: usize| -> Vec<T> {
            let a = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| T::lit(rng.gen_range(-a..a))).collect()
        };
        Self {
            in_dim,
            hidden,
            w1: he(hidden * in_dim * 9, in_dim * 9),
            b1: vec![T::zero(); hidden],
            w2: he(hidden * hidden * 9, hidden * 9),
            b2: vec![T::zero(); hidden],
            w3: he(hidden, hidden),
            b3: T::zero(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + self.w3.len() + 1
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.num_params());
        for part in [&self.w1, &self.b1, &self.w2, &self.b2, &self.w3] {
            v.extend(part.iter().copied());
        }
        v.push(self.b3);
        v
    }

    pub fn set_flat(&mut self, v: &[T]) {
        assert_eq!(v.len(), self.num_params());
        let mut o = 0;
        for part in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.w3] {
            let n = part.len();
            part.copy_from_slice(&v[o..o + n]);
            o += n;
        }
        self.b3 = v[o];
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        let (d, h) = (self.in_dim, self.hidden);
        let shapes = [
            (self.w1.len(), h * d * 9),
            (self.b1.len(), h),
            (self.w2.len(), h * h * 9),
            (self.b2.len(), h),
            (self.w3.len(), h),
        ];
        if d == 0 || h == 0 || shapes.iter().any(|(a, b)| a != b) {
            return Err(DetectorError::Invalid("tensor shapes do not match topology".into()));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(DetectorError::Invalid("non-finite weight".into()));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> DetectorParams<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::lit(x.as_f64())).collect();
        DetectorParams {
            in_dim: self.in_dim,
            hidden: self.hidden,
            w1: c(&self.w1),
            b1: c(&self.b1),
            w2: c(&self.w2),
            b2: c(&self.b2),
            w3: c(&self.w3),
            b3: U::lit(self.b3.as_f64()),
        }
    }
}

/// Per-cell landmark probability, row-major `H′ × W′`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap<T: Scalar> {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ProbabilityMap<T> {
    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }
}

/// Probabilities are clamped to `[ε, 1 - ε]` so they stay strictly inside `(0, 1)`.
const PROB_EPS: f64 = 1e-7;

pub fn infer<T: Scalar>(params: &DetectorParams<T>, map: &DenseFeatureMap<T>) -> Result<ProbabilityMap<T>, DetectorError> {
    if map.dim != params.in_dim {
        return Err(DetectorError::Shape(format!(
            "map has {} channels, detector expects {}",
            map.dim, params.in_dim
        )));
    }
    let (lo, hi) = (T::lit(PROB_EPS), T::lit(1.0 - PROB_EPS));
    let logits = forward_full(&Mats::new(params), map);
    Ok(ProbabilityMap {
        height: map.height,
        width: map.width,
        stride: map.stride,
        data: logits.into_iter().map(|z| sigmoid(z).max(lo).min(hi)).collect(),
    })
}

/// Binary label map at feature resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
    /// Landmarks that passed the visibility test.
    pub visible_landmarks: usize,
}

impl LabelMap {
    pub fn positives(&self) -> usize {
        self.data.iter().filter(|v| **v > 0).count()
    }
}

/// Marks discs of `label_radius` cells around every render-visible landmark.
pub fn make_labels<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    landmarks: &LandmarkSet<T>,
    pose: &Pose<T>,
    k: &CameraIntrinsics<T>,
    stride: usize,
    label_radius: usize,
) -> LabelMap {
    let (w, h) = (k.width / stride, k.height / stride);
    let mut data = vec![0u8; w * h];
    let vis = check_visibility(scene, k, pose, T::lit(crate::landmarks::DEFAULT_CONTRIBUTION_EPS));
    let mut pixel_of = vec![None; scene.len()];
    for (i, g) in vis.indices.iter().enumerate() {
        pixel_of[*g] = Some(vis.pixels[i]);
    }
    let r = label_radius as isize;
    let mut visible = 0;
    for &g in &landmarks.indices {
        let Some(px) = pixel_of.get(g).copied().flatten() else {
            continue;
        };
        visible += 1;
        let (cx, cy) = (pixel_to_cell(px.x, stride, w) as isize, pixel_to_cell(px.y, stride, h) as isize);
        for dy in -r..=r {
            for dx in -r..=r {
                let (x, y) = (cx + dx, cy + dy);
                if dx * dx + dy * dy <= r * r && x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                    data[y as usize * w + x as usize] = 1;
                }
            }
        }
    }
    if visible == 0 {
        log::warn!("training view sees no landmarks");
    }
    LabelMap {
        height: h,
        width: w,
        data,
        visible_landmarks: visible,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    /// Cells drawn per iteration, half positive and half negative.
    pub batch_cells: usize,
    pub pos_weight_cap: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            learning_rate: 1e-3,
            schedule: LrSchedule::Cosine,
            batch_cells: 256,
            pos_weight_cap: 100.0,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

/// Per-cell weights: positives get `min(neg / pos, cap)` per map, negatives 1.
pub fn class_weights(labels: &LabelMap, cap: f64) -> (f64, f64) {
    let pos = labels.positives();
    let neg = labels.data.len() - pos;
    let wp = if pos > 0 && neg > 0 { (neg as f64 / pos as f64).min(cap) } else { 1.0 };
    (wp, 1.0)
}

fn check_samples<T: Scalar>(samples: &[(DenseFeatureMap<T>, LabelMap)]) -> Result<usize, DetectorError> {
    let Some(first) = samples.first() else {
        return Err(DetectorError::NoSamples);
    };
    let d = first.0.dim;
    for (m, l) in samples {
        if m.dim != d {
            return Err(DetectorError::Shape("feature maps differ in channel count".into()));
        }
        if m.height != l.height || m.width != l.width {
            return Err(DetectorError::Shape(format!(
                "labels {}x{} vs features {}x{}",
                l.width, l.height, m.width, m.height
            )));
        }
    }
    Ok(d)
}

fn all_cells<T: Scalar>(samples: &[(DenseFeatureMap<T>, LabelMap)], cap: f64) -> Vec<CellSample<T>> {
    let mut cells = Vec::new();
    for (mi, (m, l)) in samples.iter().enumerate() {
        let (wp, wn) = class_weights(l, cap);
        for y in 0..m.height {
            for x in 0..m.width {
                let pos = l.data[y * m.width + x] > 0;
                cells.push(CellSample {
                    map: mi,
                    y,
                    x,
                    label: if pos { T::one() } else { T::zero() },
                    weight: T::lit(if pos { wp } else { wn }),
                });
            }
        }
    }
    cells
}

fn weighted_mean_loss<T: Scalar>(
    params: &DetectorParams<T>,
    maps: &[DenseFeatureMap<T>],
    cells: &[CellSample<T>],
    want_grad: bool,
) -> (T, Option<Vec<T>>) {
    let m = Mats::new(params);
    let chunks: Vec<&[CellSample<T>]> = cells.chunks(512).collect();
    let parts: Vec<(T, Option<Vec<T>>)> = chunks
        .par_iter()
        .map(|c| {
            let (l, g) = cells_loss_grad(&m, maps, c, want_grad);
            (l, g.map(|g| g.flat()))
        })
        .collect();
    let wsum = cells.iter().fold(T::zero(), |a, c| a + c.weight);
    let mut loss = T::zero();
    let mut grad = want_grad.then(|| vec![T::zero(); params.num_params()]);
    for (l, g) in parts {
        loss += l;
        if let (Some(acc), Some(g)) = (grad.as_mut(), g) {
            acc.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
        }
    }
    let inv = T::one() / wsum;
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    (loss * inv, grad)
}

/// Class-weighted mean BCE over every cell of every sample.
pub fn detector_loss<T: Scalar>(
    params: &DetectorParams<T>,
    samples: &[(DenseFeatureMap<T>, LabelMap)],
    pos_weight_cap: f64,
) -> Result<T, DetectorError> {
    check_samples(samples)?;
    let maps: Vec<DenseFeatureMap<T>> = samples.iter().map(|s| s.0.clone()).collect();
    Ok(weighted_mean_loss(params, &maps, &all_cells(samples, pos_weight_cap), false).0)
}

/// Loss of [`detector_loss`] and its gradient in [`DetectorParams::to_flat`] order.
pub fn detector_loss_and_gradient<T: Scalar>(
    params: &DetectorParams<T>,
    samples: &[(DenseFeatureMap<T>, LabelMap)],
    pos_weight_cap: f64,
) -> Result<(T, Vec<T>), DetectorError> {
    check_samples(samples)?;
    let maps: Vec<DenseFeatureMap<T>> = samples.iter().map(|s| s.0.clone()).collect();
    let (l, g) = weighted_mean_loss(params, &maps, &all_cells(samples, pos_weight_cap), true);
    Ok((l, g.expect("gradient requested")))
}

/// Fits the detector on cell minibatches.
///
/// Positives are drawn in proportion to their class weight and negatives
/// uniformly, half a batch each; the batch loss is mixed back by the total
/// class masses, so it estimates the full weighted BCE without bias.
pub fn train_detector<T: Scalar>(
    samples: &[(DenseFeatureMap<T>, LabelMap)],
    config: &DetectorConfig,
) -> Result<(DetectorParams<T>, Vec<f64>), DetectorError> {
    let d = check_samples(samples)?;
    if config.hidden == 0 || config.batch_cells < 2 {
        return Err(DetectorError::Invalid("hidden and batch_cells must be positive".into()));
    }
    let maps: Vec<DenseFeatureMap<T>> = samples.iter().map(|s| s.0.clone()).collect();
    let cells = all_cells::<T>(samples, config.pos_weight_cap);
    let (pos, neg): (Vec<_>, Vec<_>) = cells.iter().copied().partition(|c| c.label > T::zero());
    let mass_pos: f64 = pos.iter().map(|c| c.weight.as_f64()).sum();
    let mass_neg: f64 = neg.iter().map(|c| c.weight.as_f64()).sum();
    let pos_pick = if pos.is_empty() {
        None
    } else {
        Some(WeightedIndex::new(pos.iter().map(|c| c.weight.as_f64())).expect("positive weights"))
    };
    let mut params = DetectorParams::<T>::init(d, config.hidden, config.seed);
    let mut flat = params.to_flat();
    let mut opt = Adam::<T>::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut history = Vec::with_capacity(config.iterations);
    let half = config.batch_cells / 2;
    for it in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch_cells);
        let total = mass_pos + mass_neg;
        if let Some(pick) = &pos_pick {
            let w = T::lit(mass_pos / total / half as f64);
            for _ in 0..half {
                batch.push(CellSample { weight: w, ..pos[pick.sample(&mut rng)] });
            }
        }
        if !neg.is_empty() {
            let n_neg = if pos_pick.is_some() { config.batch_cells - half } else { config.batch_cells };
            let w = T::lit(mass_neg / total / n_neg as f64);
            for _ in 0..n_neg {
                batch.push(CellSample { weight: w, ..neg[rng.gen_range(0..neg.len())] });
            }
        }
        // weights already sum to one
        let (loss, grad) = {
            let m = Mats::new(&params);
            let chunks: Vec<&[CellSample<T>]> = batch.chunks(64).collect();
            let parts: Vec<(T, Vec<T>)> = chunks
                .par_iter()
                .map(|c| {
                    let (l, g) = cells_loss_grad(&m, &maps, c, true);
                    (l, g.expect("gradient requested").flat())
                })
                .collect();
            let mut loss = T::zero();
            let mut grad = vec![T::zero(); flat.len()];
            for (l, g) in parts {
                loss += l;
                grad.iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
            }
            (loss, grad)
        };
        let lv = loss.as_f64();
        if !lv.is_finite() {
            return Err(DetectorError::NonFiniteLoss { iteration: it });
        }
        history.push(lv);
        opt.update(&mut flat, &grad, config.schedule.rate(config.learning_rate, it, config.iterations));
        params.set_flat(&flat);
    }
    Ok((params, history))
}

/// Keypoints at feature resolution plus their image-pixel positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet<T: Scalar> {
    /// `(u, v)` = (column, row) cells.
    pub cells: Vec<(usize, usize)>,
    pub pixels: Vec<Vector2<T>>,
    pub confidences: Vec<T>,
}

impl<T: Scalar> KeypointSet<T> {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

pub const DEFAULT_TAU: f64 = 0.5;
pub const DEFAULT_NMS_RADIUS: usize = 4;
pub const DEFAULT_MAX_KEYPOINTS: usize = 4096;

/// Greedy NMS: cells in descending probability, kept when above `tau` and
/// farther than `r` (Chebyshev) from every kept cell.
pub fn detect_keypoints<T: Scalar>(map: &ProbabilityMap<T>, tau: T, r: usize, max_k: usize) -> KeypointSet<T> {
    let (w, h) = (map.width, map.height);
    let mut order: Vec<usize> = (0..w * h).filter(|p| map.data[*p] > tau).collect();
    order.sort_by(|a, b| total_cmp(&map.data[*b], &map.data[*a]).then(a.cmp(b)));
    let mut taken = vec![false; w * h];
    let mut out = KeypointSet {
        cells: Vec::new(),
        pixels: Vec::new(),
        confidences: Vec::new(),
    };
    let r = r as isize;
    for p in order {
        if out.len() >= max_k {
            break;
        }
        let (x, y) = ((p % w) as isize, (p / w) as isize);
        let mut clear = true;
        'scan: for dy in -r..=r {
            for dx in -r..=r {
                let (xx, yy) = (x + dx, y + dy);
                if xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && taken[yy as usize * w + xx as usize] {
                    clear = false;
                    break 'scan;
                }
            }
        }
        if clear {
            taken[p] = true;
            out.cells.push((x as usize, y as usize));
            out.pixels.push(Vector2::new(
                cell_to_pixel(T::from_usize_lossy(x as usize), map.stride),
                cell_to_pixel(T::from_usize_lossy(y as usize), map.stride),
            ));
            out.confidences.push(map.data[p]);
        }
    }
    out
}

const MAGIC: &[u8; 4] = b"DET1";
const RELU: u32 = 1;
const SIGMOID: u32 = 2;

/// `DET1`, u32 layer count, per layer `(out, in, kernel, activation)`, then
/// each layer's weights followed by its biases as little-endian f32.
pub fn write_detector<T: Scalar>(p: &DetectorParams<T>, w: &mut impl Write) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(3)?;
    for (o, i, k, a) in [(p.hidden, p.in_dim, 3, RELU), (p.hidden, p.hidden, 3, RELU), (1, p.hidden, 1, SIGMOID)] {
        for v in [o as u32, i as u32, k, a] {
            w.write_u32::<LittleEndian>(v)?;
        }
    }
    for v in p.to_flat() {
        w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
    }
    Ok(())
}

pub fn read_detector<T: Scalar>(r: &mut impl Read) -> Result<DetectorParams<T>, DetectorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DetectorError::Invalid("bad magic".into()));
    }
    if r.read_u32::<LittleEndian>()? != 3 {
        return Err(DetectorError::Invalid("unsupported layer count".into()));
    }
    let mut layers = [[0u32; 4]; 3];
    for l in &mut layers {
        for v in l.iter_mut() {
            *v = r.read_u32::<LittleEndian>()?;
        }
    }
    let (hidden, in_dim) = (layers[0][0] as usize, layers[0][1] as usize);
    let expected = [
        [hidden as u32, in_dim as u32, 3, RELU],
        [hidden as u32, hidden as u32, 3, RELU],
        [1, hidden as u32, 1, SIGMOID],
    ];
    if layers != expected {
        return Err(DetectorError::Invalid("topology descriptor does not match".into()));
    }
    let mut p = DetectorParams::<T> {
        in_dim,
        hidden,
        w1: vec![T::zero(); hidden * in_dim * 9],
        b1: vec![T::zero(); hidden],
        w2: vec![T::zero(); hidden * hidden * 9],
        b2: vec![T::zero(); hidden],
        w3: vec![T::zero(); hidden],
        b3: T::zero(),
    };
    let mut flat = vec![0f32; p.num_params()];
    r.read_f32_into::<LittleEndian>(&mut flat)?;
    p.set_flat(&flat.iter().map(|v| T::lit(*v as f64)).collect::<Vec<_>>());
    p.validate()?;
    Ok(p)
}

pub fn save_detector<T: Scalar>(p: &DetectorParams<T>, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_detector(p, &mut w)?;
    w.flush()
}

pub fn load_detector<T: Scalar>(path: impl AsRef<Path>) -> Result<DetectorParams<T>, DetectorError> {
    read_detector(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::SignificanceTable;
    use crate::scene::GaussianPrimitive;
    use nalgebra::Vector3;
    use std::io::Cursor;

    fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> DenseFeatureMap<f64> {
        let mut m = DenseFeatureMap::zeros(d, h, w, 1);
        m.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        m
    }

    fn labels_where(m: &DenseFeatureMap<f64>, f: impl Fn(usize, usize) -> bool) -> LabelMap {
        let data = (0..m.height * m.width).map(|p| f(p / m.width, p % m.width) as u8).collect();
        LabelMap { height: m.height, width: m.width, data, visible_landmarks: 0 }
    }

    #[test]
    fn half_probability_gives_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = DetectorParams::<f64>::init(3, 8, 0);
        p.w3.iter_mut().for_each(|v| *v = 0.0);
        let m = random_map(&mut rng, 3, 6, 6);
        let l = labels_where(&m, |y, x| (x + y) % 3 == 0);
        let loss = detector_loss(&p, &[(m, l)], 100.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_map(&mut rng, 3, 4, 4);
        let l = labels_where(&m, |y, x| m.get(0, y, x) > 0.0);
        let samples = vec![(m, l)];
        let mut p = DetectorParams::<f64>::init(3, 6, 2);
        p.b1.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.3));
        p.b2.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.3));
        let (_, grad) = detector_loss_and_gradient(&p, &samples, 100.0).unwrap();
        let base = p.to_flat();
        let h = 1e-5;
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..10 {
            let i = rng.gen_range(0..base.len());
            let mut plus = p.clone();
            let mut minus = p.clone();
            let mut v = base.clone();
            v[i] += h;
            plus.set_flat(&v);
            v[i] -= 2.0 * h;
            minus.set_flat(&v);
            let lp = detector_loss(&plus, &samples, 100.0).unwrap();
            let lm = detector_loss(&minus, &samples, 100.0).unwrap();
            num.push((lp - lm) / (2.0 * h));
            ana.push(grad[i]);
        }
        let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = ana.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        assert!(diff / norm < 1e-3, "relative error {} ({num:?} vs {ana:?})", diff / norm);
    }

    #[test]
    fn learns_a_separable_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<_> = (0..4)
            .map(|_| {
                let m = random_map(&mut rng, 4, 16, 16);
                let l = labels_where(&m, |y, x| m.get(0, y, x) > 0.0);
                (m, l)
            })
            .collect();
        let cfg = DetectorConfig {
            iterations: 600,
            learning_rate: 1e-2,
            batch_cells: 128,
            hidden: 16,
            ..Default::default()
        };
        let (p, hist) = train_detector(&samples, &cfg).unwrap();
        let loss = detector_loss(&p, &samples, 100.0).unwrap();
        assert!(loss < 0.05, "final BCE {loss}");
        assert!(hist.last().unwrap() < &hist[0]);
    }

    #[test]
    fn full_inference_matches_cell_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 3, 7, 9);
        let p = DetectorParams::<f64>::init(3, 8, 5);
        let e = infer(&p, &m).unwrap();
        let cells: Vec<CellSample<f64>> = (0..63)
            .map(|i| CellSample { map: 0, y: i / 9, x: i % 9, label: 0.0, weight: 1.0 })
            .collect();
        let mats = Mats::new(&p);
        for c in &cells {
            let (l, _) = cells_loss_grad(&mats, std::slice::from_ref(&m), std::slice::from_ref(c), false);
            // with label 0 the loss is -ln(1 - p)
            let prob = 1.0 - (-l).exp();
            assert!((prob - e.get(c.y, c.x)).abs() < 1e-9);
        }
        assert!(e.data.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn translation_equivariant_in_interior() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = random_map(&mut rng, 3, 20, 20);
        let (dx, dy) = (3usize, 2usize);
        let mut shifted = DenseFeatureMap::zeros(3, 20, 20, 1);
        for c in 0..3 {
            for y in dy..20 {
                for x in dx..20 {
                    shifted.set(c, y, x, m.get(c, y - dy, x - dx));
                }
            }
        }
        let p = DetectorParams::<f64>::init(3, 8, 7);
        let (a, b) = (infer(&p, &m).unwrap(), infer(&p, &shifted).unwrap());
        for y in 2 + dy..18 {
            for x in 2 + dx..18 {
                assert!((a.get(y - dy, x - dx) - b.get(y, x)).abs() < 1e-5);
            }
        }
    }

    fn pmap(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> ProbabilityMap<f64> {
        ProbabilityMap { height: h, width: w, stride: 2, data: (0..w * h).map(|p| f(p % w, p / w)).collect() }
    }

    #[test]
    fn nms_trivial_cases() {
        assert!(detect_keypoints(&pmap(8, 8, |_, _| 0.4), 0.5, 2, 10).is_empty());
        let k = detect_keypoints(&pmap(8, 8, |x, y| if (x, y) == (5, 2) { 0.9 } else { 0.1 }), 0.5, 2, 10);
        assert_eq!(k.cells, vec![(5, 2)]);
        assert_eq!(k.pixels[0], Vector2::new(10.5, 4.5));
    }

    fn eq9(map: &ProbabilityMap<f64>, tau: f64, r: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let r = r as isize;
        for y in 0..map.height {
            for x in 0..map.width {
                let v = map.get(y, x);
                if v <= tau {
                    continue;
                }
                let mut is_max = true;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (xx, yy) = (x as isize + dx, y as isize + dy);
                        if (dx, dy) != (0, 0)
                            && xx >= 0
                            && yy >= 0
                            && (xx as usize) < map.width
                            && (yy as usize) < map.height
                            && map.get(yy as usize, xx as usize) >= v
                        {
                            is_max = false;
                        }
                    }
                }
                if is_max {
                    out.push((x, y));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn nms_matches_local_maximum_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for r in 1..4 {
            // well-separated bumps: greedy and the definition coincide
            let peaks: Vec<(f64, f64, f64)> = (0..6)
                .map(|i| ((i % 3) as f64 * 12.0 + 5.0, (i / 3) as f64 * 12.0 + 5.0, rng.gen_range(0.6..0.95)))
                .collect();
            let m = pmap(36, 24, |x, y| {
                peaks
                    .iter()
                    .map(|(px, py, a)| {
                        // above-threshold support stays within r of each peak
                        let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                        a * (-d2 / (0.5 * (r * r) as f64)).exp()
                    })
                    .fold(0.05, f64::max)
                    + 1e-6 * ((x * 31 + y * 17) % 13) as f64
            });
            let mut got = detect_keypoints(&m, 0.5, r, 100).cells;
            got.sort();
            assert_eq!(got, eq9(&m, 0.5, r));
            // on random maps every strict local maximum survives greedy NMS
            let rm = pmap(20, 20, |_, _| rng.gen_range(0.0..1.0));
            let greedy = detect_keypoints(&rm, 0.5, r, 1000);
            for p in eq9(&rm, 0.5, r) {
                assert!(greedy.cells.contains(&p));
            }
            for a in 0..greedy.len() {
                for b in a + 1..greedy.len() {
                    let (p, q) = (greedy.cells[a], greedy.cells[b]);
                    let d = p.0.abs_diff(q.0).max(p.1.abs_diff(q.1));
                    assert!(d > r);
                }
            }
        }
    }

    #[test]
    fn det1_round_trip() {
        let p = DetectorParams::<f64>::init(5, 4, 9).cast::<f32>().cast::<f64>();
        let mut buf = Vec::new();
        write_detector(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DET1");
        assert_eq!(buf.len(), 8 + 3 * 16 + p.num_params() * 4);
        let back: DetectorParams<f64> = read_detector(&mut Cursor::new(buf)).unwrap();
        assert_eq!(back, p);
    }

    fn label_scene(extra: Vec<GaussianPrimitive<f64>>) -> (FeatureGaussianScene<f64>, LandmarkSet<f64>) {
        let mut s = FeatureGaussianScene::new(1);
        s.primitives.push(GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, 8.0), 0.05, 0.9, Vector3::zeros(), vec![1.0]));
        s.primitives.extend(extra);
        let t = SignificanceTable::<f64> {
            score_sum: vec![1.0; s.len()],
            visibility_count: vec![1; s.len()],
            final_score: vec![1.0; s.len()],
            empty_views: vec![],
        };
        let lm = LandmarkSet::from_indices(&s, &t, vec![0]);
        (s, lm)
    }

    #[test]
    fn labels_from_projected_landmarks() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.5, 50.5, 100, 100).unwrap();
        let (s, lm) = label_scene(vec![]);
        let l = make_labels(&s, &lm, &Pose::identity(), &k, 2, 0);
        assert_eq!(l.positives(), 1);
        // cell sample point 25·2 + 0.5 = 50.5
        assert_eq!(l.data[25 * 50 + 25], 1);
        let l1 = make_labels(&s, &lm, &Pose::identity(), &k, 2, 1);
        assert_eq!(l1.positives(), 5);

        let behind = Pose::from_axis_angle(Vector3::new(0.0, std::f64::consts::PI, 0.0), Vector3::zeros());
        assert_eq!(make_labels(&s, &lm, &behind, &k, 2, 1).positives(), 0);

        let wall = |z| GaussianPrimitive::isotropic(Vector3::new(0.0, 0.0, z), 5.0, 0.999, Vector3::zeros(), vec![0.0]);
        let (s, lm) = label_scene(vec![wall(4.0), wall(4.01)]);
        let l = make_labels(&s, &lm, &Pose::identity(), &k, 2, 1);
        assert_eq!((l.positives(), l.visible_landmarks), (0, 0));
    }
}
