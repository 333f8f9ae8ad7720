//! Per-Gaussian significance scoring and kNN score-competition landmark sampling.

mod knn;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::features::{cosine, DenseFeatureMap};
use crate::geometry::{pixel_to_cell, CameraIntrinsics, Pose};
use crate::raster::check_visibility;
use crate::scalar::{total_cmp, Scalar};
use crate::scene::FeatureGaussianScene;

pub use knn::{brute_force_neighbors, GridKnn};

#[derive(Debug, Error)]
pub enum LandmarkError {
    #[error("no Gaussian is visible in any view")]
    NoEligible,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("landmark file: {0}")]
    Format(String),
}

/// Minimum blend weight for a Gaussian to count as seen in a view.
pub const DEFAULT_CONTRIBUTION_EPS: f64 = 1e-6;

/// One scoring view: its dense feature map and the camera that took it.
#[derive(Debug, Clone)]
pub struct ScoreView<T: Scalar> {
    pub features: DenseFeatureMap<T>,
    pub pose: Pose<T>,
    /// Intrinsics of the source image the feature map was extracted from.
    pub intrinsics: CameraIntrinsics<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceTable<T: Scalar> {
    pub score_sum: Vec<T>,
    pub visibility_count: Vec<u32>,
    /// `score_sum / M`, or `-inf` when `M = 0`.
    pub final_score: Vec<T>,
    /// Views in which nothing was visible.
    pub empty_views: Vec<usize>,
}

impl<T: Scalar> SignificanceTable<T> {
    pub fn len(&self) -> usize {
        self.score_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.score_sum.is_empty()
    }

    pub fn eligible(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| self.visibility_count[*i] > 0).collect()
    }

    fn finalize(score_sum: Vec<T>, visibility_count: Vec<u32>, empty_views: Vec<usize>) -> Self {
        let final_score = score_sum
            .iter()
            .zip(&visibility_count)
            .map(|(s, m)| if *m == 0 { T::lit(f64::NEG_INFINITY) } else { *s / T::lit(*m as f64) })
            .collect();
        Self {
            score_sum,
            visibility_count,
            final_score,
            empty_views,
        }
    }
}

/// Visible Gaussians of one view and the similarity of each to the sampled feature.
struct ViewScores<T> {
    indices: Vec<usize>,
    scores: Vec<T>,
}

fn view_scores<T: Scalar>(scene: &FeatureGaussianScene<T>, view: &ScoreView<T>) -> ViewScores<T> {
    let vis = check_visibility(scene, &view.intrinsics, &view.pose, T::lit(DEFAULT_CONTRIBUTION_EPS));
    let f = &view.features;
    let s = f.stride;
    let mut sample = vec![T::zero(); f.dim];
    let scores = vis
        .indices
        .iter()
        .zip(&vis.pixels)
        .map(|(&g, px)| {
            let (cx, cy) = (pixel_to_cell(px.x, s, f.width), pixel_to_cell(px.y, s, f.height));
            for (c, v) in sample.iter_mut().enumerate() {
                *v = f.get(c, cy, cx);
            }
            cosine(&scene.primitives[g].feature, &sample)
        })
        .collect();
    ViewScores {
        indices: vis.indices,
        scores,
    }
}

/// Accumulates per-Gaussian cosine similarity and visibility counts over all views.
///
/// Gaussians are accumulated in index batches of `batch_size`; each Gaussian's
/// sum runs in view order, so the table does not depend on the batch size.
pub fn score_scene<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    views: &[ScoreView<T>],
    batch_size: usize,
) -> Result<SignificanceTable<T>, LandmarkError> {
    if views.is_empty() {
        return Err(LandmarkError::InvalidArgument("no views".into()));
    }
    if batch_size == 0 {
        return Err(LandmarkError::InvalidArgument("batch_size must be >= 1".into()));
    }
    if let Some(v) = views.iter().find(|v| v.features.dim != scene.feature_dim) {
        return Err(LandmarkError::InvalidArgument(format!(
            "view features have {} channels, scene has {}",
            v.features.dim, scene.feature_dim
        )));
    }
    let per_view: Vec<ViewScores<T>> = views.par_iter().map(|v| view_scores(scene, v)).collect();
    let mut empty_views = Vec::new();
    for (i, v) in per_view.iter().enumerate() {
        if v.indices.is_empty() {
            log::warn!("view {i} sees no Gaussians");
            empty_views.push(i);
        }
    }
    let n = scene.len();
    let mut score_sum = Vec::with_capacity(n);
    let mut visibility_count = Vec::with_capacity(n);
    let mut cursors = vec![0usize; per_view.len()];
    for start in (0..n).step_by(batch_size) {
        let end = (start + batch_size).min(n);
        let mut sums = vec![T::zero(); end - start];
        let mut counts = vec![0u32; end - start];
        for (v, cur) in per_view.iter().zip(cursors.iter_mut()) {
            while *cur < v.indices.len() && v.indices[*cur] < end {
                let g = v.indices[*cur] - start;
                sums[g] += v.scores[*cur];
                counts[g] += 1;
                *cur += 1;
            }
        }
        score_sum.extend(sums);
        visibility_count.extend(counts);
    }
    Ok(SignificanceTable::finalize(score_sum, visibility_count, empty_views))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet<T: Scalar> {
    pub indices: Vec<usize>,
    pub scores: Vec<T>,
    pub features: Vec<Vec<T>>,
    pub centers: Vec<Vector3<T>>,
}

impl<T: Scalar> LandmarkSet<T> {
    pub fn from_indices(scene: &FeatureGaussianScene<T>, table: &SignificanceTable<T>, indices: Vec<usize>) -> Self {
        Self {
            scores: indices.iter().map(|i| table.final_score[*i]).collect(),
            features: indices.iter().map(|i| scene.primitives[*i].feature.clone()).collect(),
            centers: indices.iter().map(|i| scene.primitives[*i].center).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

/// Seeded uniform draw of `min(q, eligible)` distinct eligible Gaussians.
pub fn initial_samples<T: Scalar>(table: &SignificanceTable<T>, q: usize, seed: u64) -> Vec<usize> {
    let eligible = table.eligible();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::index::sample(&mut rng, eligible.len(), q.min(eligible.len()))
        .into_iter()
        .map(|i| eligible[i])
        .collect()
}

/// Highest-scoring eligible member of a neighbourhood; ties go to the lower index.
fn winner<T: Scalar>(table: &SignificanceTable<T>, neighborhood: &[usize]) -> usize {
    let mut best = neighborhood[0];
    for &j in neighborhood {
        if table.visibility_count[j] == 0 {
            continue;
        }
        let (a, b) = (table.final_score[j], table.final_score[best]);
        if a > b || (a == b && j < best) {
            best = j;
        }
    }
    best
}

fn dedup_first(v: Vec<usize>) -> Vec<usize> {
    let mut seen = std::collections::HashSet::new();
    v.into_iter().filter(|i| seen.insert(*i)).collect()
}

fn check_args<T: Scalar>(scene: &FeatureGaussianScene<T>, table: &SignificanceTable<T>, q: usize, k: usize) -> Result<(), LandmarkError> {
    if q == 0 || k == 0 {
        return Err(LandmarkError::InvalidArgument("Q and k must be >= 1".into()));
    }
    if table.len() != scene.len() {
        return Err(LandmarkError::InvalidArgument(format!(
            "table covers {} Gaussians, scene has {}",
            table.len(),
            scene.len()
        )));
    }
    if table.visibility_count.iter().all(|m| *m == 0) {
        return Err(LandmarkError::NoEligible);
    }
    Ok(())
}

/// Random initial samples, each replaced by the best-scoring Gaussian among its `k` nearest neighbours.
pub fn sample_landmarks<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    table: &SignificanceTable<T>,
    q: usize,
    k: usize,
    seed: u64,
) -> Result<LandmarkSet<T>, LandmarkError> {
    check_args(scene, table, q, k)?;
    let init = initial_samples(table, q, seed);
    let knn = GridKnn::new(scene, k);
    let picked: Vec<usize> = init.par_iter().map(|&i| winner(table, &knn.neighbors(i, k))).collect();
    Ok(LandmarkSet::from_indices(scene, table, dedup_first(picked)))
}

/// Same selection using exhaustive pairwise distances.
pub fn sample_landmarks_brute_force<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    table: &SignificanceTable<T>,
    q: usize,
    k: usize,
    seed: u64,
) -> Result<LandmarkSet<T>, LandmarkError> {
    check_args(scene, table, q, k)?;
    let centers = scene.centers();
    let picked = initial_samples(table, q, seed)
        .into_iter()
        .map(|i| winner(table, &brute_force_neighbors(&centers, i, k)))
        .collect();
    Ok(LandmarkSet::from_indices(scene, table, dedup_first(picked)))
}

/// The `q` eligible Gaussians with the highest final score.
pub fn top_landmarks<T: Scalar>(scene: &FeatureGaussianScene<T>, table: &SignificanceTable<T>, q: usize) -> LandmarkSet<T> {
    let mut e = table.eligible();
    e.sort_by(|a, b| total_cmp(&table.final_score[*b], &table.final_score[*a]).then(a.cmp(b)));
    e.truncate(q);
    LandmarkSet::from_indices(scene, table, e)
}

/// Uniform random eligible Gaussians without competition.
pub fn random_landmarks<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    table: &SignificanceTable<T>,
    q: usize,
    seed: u64,
) -> LandmarkSet<T> {
    LandmarkSet::from_indices(scene, table, initial_samples(table, q, seed))
}

const MAGIC: &[u8; 4] = b"LMK1";

pub fn write_landmarks<T: Scalar>(set: &LandmarkSet<T>, w: &mut impl Write) -> io::Result<()> {
    let d = set.feature_dim();
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(set.len() as u32)?;
    w.write_u32::<LittleEndian>(d as u32)?;
    for i in 0..set.len() {
        w.write_u32::<LittleEndian>(set.indices[i] as u32)?;
        w.write_f32::<LittleEndian>(set.scores[i].as_f64() as f32)?;
        for a in 0..3 {
            w.write_f32::<LittleEndian>(set.centers[i][a].as_f64() as f32)?;
        }
        for f in &set.features[i] {
            w.write_f32::<LittleEndian>(f.as_f64() as f32)?;
        }
    }
    Ok(())
}

pub fn read_landmarks<T: Scalar>(r: &mut impl Read) -> Result<LandmarkSet<T>, LandmarkError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(LandmarkError::Format("bad magic".into()));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let d = r.read_u32::<LittleEndian>()? as usize;
    let mut set = LandmarkSet {
        indices: Vec::with_capacity(n),
        scores: Vec::with_capacity(n),
        features: Vec::with_capacity(n),
        centers: Vec::with_capacity(n),
    };
    let f = |r: &mut dyn Read| -> io::Result<T> { Ok(T::lit(r.read_f32::<LittleEndian>()? as f64)) };
    for _ in 0..n {
        set.indices.push(r.read_u32::<LittleEndian>()? as usize);
        set.scores.push(f(r)?);
        set.centers.push(Vector3::new(f(r)?, f(r)?, f(r)?));
        set.features.push((0..d).map(|_| f(r)).collect::<io::Result<_>>()?);
    }
    Ok(set)
}

pub fn save_landmarks<T: Scalar>(set: &LandmarkSet<T>, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_landmarks(set, &mut w)?;
    w.flush()
}

pub fn load_landmarks<T: Scalar>(path: impl AsRef<Path>) -> Result<LandmarkSet<T>, LandmarkError> {
    read_landmarks(&mut BufReader::new(File::open(path)?))
}
