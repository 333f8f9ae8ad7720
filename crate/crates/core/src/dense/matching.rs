//! Probabilistic mutual matching between feature maps, coarse to fine.

use nalgebra::{DMatrix, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::DenseFeatureMap;
use crate::scalar::Scalar;

/// Fine-to-coarse window side.
pub const WINDOW: usize = 8;

/// Bidirectional softmax: `row_softmax(sim/τ) ⊙ col_softmax(sim/τ)`.
pub fn pmm<T: Scalar>(sim: &DMatrix<T>, temperature: T) -> DMatrix<T> {
    let (r, c) = sim.shape();
    let mut out = DMatrix::<T>::zeros(r, c);
    if r == 0 || c == 0 {
        return out;
    }
    let s = sim / temperature;
    let mut row = DMatrix::<T>::zeros(r, c);
    for i in 0..r {
        let m = s.row(i).max();
        let mut z = T::zero();
        for j in 0..c {
            let e = (s[(i, j)] - m).exp();
            row[(i, j)] = e;
            z += e;
        }
        for j in 0..c {
            row[(i, j)] /= z;
        }
    }
    for j in 0..c {
        let m = s.column(j).max();
        let mut z = T::zero();
        for i in 0..r {
            let e = (s[(i, j)] - m).exp();
            out[(i, j)] = e;
            z += e;
        }
        for i in 0..r {
            out[(i, j)] = out[(i, j)] / z * row[(i, j)];
        }
    }
    out
}

/// Pairs `(i, j)` whose entry is the strict maximum of both its row and its
/// column and exceeds `p_min`. Sorted by row.
pub fn mutual_nn<T: Scalar>(prob: &DMatrix<T>, p_min: T) -> Vec<(usize, usize)> {
    let (r, c) = prob.shape();
    if r == 0 || c == 0 {
        return Vec::new();
    }
    // strict argmax per column: None when the maximum is shared
    let col_best: Vec<Option<usize>> = (0..c)
        .map(|j| {
            let mut best = 0;
            let mut unique = true;
            for i in 1..r {
                if prob[(i, j)] > prob[(best, j)] {
                    best = i;
                    unique = true;
                } else if prob[(i, j)] == prob[(best, j)] {
                    unique = false;
                }
            }
            unique.then_some(best)
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..r {
        let mut best = 0;
        let mut unique = true;
        for j in 1..c {
            if prob[(i, j)] > prob[(i, best)] {
                best = j;
                unique = true;
            } else if prob[(i, j)] == prob[(i, best)] {
                unique = false;
            }
        }
        if unique && col_best[best] == Some(i) && prob[(i, best)] > p_min {
            out.push((i, best));
        }
    }
    out
}

/// Cosine similarity between two sets of unit rows stored cell-major.
fn similarity<T: Scalar>(a: &[T], b: &[T], dim: usize) -> DMatrix<T> {
    let (na, nb) = (a.len() / dim, b.len() / dim);
    let ma = DMatrix::from_row_slice(na, dim, a);
    let mb = DMatrix::from_row_slice(nb, dim, b);
    ma * mb.transpose()
}

/// `w × w` average pooling. Edge windows average only the cells that exist.
pub fn average_pool<T: Scalar>(map: &DenseFeatureMap<T>, w: usize) -> DenseFeatureMap<T> {
    let (h, wd) = (map.height.div_ceil(w), map.width.div_ceil(w));
    let mut out = DenseFeatureMap::zeros(map.dim, h, wd, map.stride * w);
    for cy in 0..h {
        for cx in 0..wd {
            let ys = cy * w..((cy + 1) * w).min(map.height);
            let xs = cx * w..((cx + 1) * w).min(map.width);
            let n = T::from_usize_lossy(ys.len() * xs.len());
            for c in 0..map.dim {
                let mut s = T::zero();
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += map.get(c, y, x);
                    }
                }
                out.set(c, cy, cx, s / n);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoarseMatch<T: Scalar> {
    /// `(x, y)` coarse cells.
    pub query: (usize, usize),
    pub rendered: (usize, usize),
    pub prob: T,
}

/// Fine match in fine-cell coordinates (`x`, `y`), sub-cell refined on both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineMatch<T: Scalar> {
    pub query: Vector2<T>,
    pub rendered: Vector2<T>,
    pub prob: T,
    /// Index of the parent coarse match.
    pub parent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatchSet<T: Scalar> {
    pub coarse: Vec<CoarseMatch<T>>,
    pub fine: Vec<FineMatch<T>>,
    pub window: usize,
    /// Entries of the coarse similarity matrix.
    pub coarse_volume: usize,
}

fn window_cells(cell: (usize, usize), w: usize, height: usize, width: usize) -> Vec<(usize, usize)> {
    let mut v = Vec::with_capacity(w * w);
    for y in cell.1 * w..((cell.1 + 1) * w).min(height) {
        for x in cell.0 * w..((cell.0 + 1) * w).min(width) {
            v.push((x, y));
        }
    }
    v
}

fn gather<T: Scalar>(unit: &[T], dim: usize, width: usize, cells: &[(usize, usize)]) -> Vec<T> {
    let mut out = Vec::with_capacity(cells.len() * dim);
    for &(x, y) in cells {
        let p = y * width + x;
        out.extend_from_slice(&unit[p * dim..(p + 1) * dim]);
    }
    out
}

/// Probability-weighted mean of the 3×3 neighborhood of `center` among
/// `cells`, as an offset from it.
fn soft_offset<T: Scalar>(cells: &[(usize, usize)], center: (usize, usize), weight: impl Fn(usize) -> T) -> Vector2<T> {
    let mut wsum = T::zero();
    let mut acc = Vector2::zeros();
    for (j, &(x, y)) in cells.iter().enumerate() {
        if x.abs_diff(center.0) <= 1 && y.abs_diff(center.1) <= 1 {
            let w = weight(j);
            wsum += w;
            let d = Vector2::new(
                T::from_usize_lossy(x) - T::from_usize_lossy(center.0),
                T::from_usize_lossy(y) - T::from_usize_lossy(center.1),
            );
            acc += d * w;
        }
    }
    acc / wsum
}

/// Pmm + MNN inside one pair of windows, with 3×3 soft-argmax refinement of
/// both ends: the rendered position from the query cell's row of probabilities,
/// the query position from the rendered cell's column.
fn match_window<T: Scalar>(
    qcells: &[(usize, usize)],
    rcells: &[(usize, usize)],
    qvec: &[T],
    rvec: &[T],
    dim: usize,
    temperature: T,
    p_min: T,
    parent: usize,
) -> Vec<FineMatch<T>> {
    let sim = similarity(qvec, rvec, dim);
    let prob = pmm(&sim, temperature);
    let pairs = mutual_nn(&prob, p_min);
    if pairs.is_empty() {
        return Vec::new();
    }
    pairs
        .into_iter()
        .map(|(a, b)| {
            let c = rcells[b];
            let q = qcells[a];
            FineMatch {
                query: Vector2::new(T::from_usize_lossy(q.0), T::from_usize_lossy(q.1))
                    + soft_offset(qcells, q, |i| prob[(i, b)]),
                rendered: Vector2::new(T::from_usize_lossy(c.0), T::from_usize_lossy(c.1))
                    + soft_offset(rcells, c, |j| prob[(a, j)]),
                prob: prob[(a, b)],
                parent,
            }
        })
        .collect()
}

/// Coarse matching on pooled maps, then fine matching inside each matched pair of windows.
pub fn coarse_to_fine_match<T: Scalar>(
    query: &DenseFeatureMap<T>,
    rendered: &DenseFeatureMap<T>,
    temperature: T,
    p_min: T,
) -> DenseMatchSet<T> {
    assert_eq!(query.dim, rendered.dim, "feature dimensions differ");
    let w = WINDOW;
    let d = query.dim;
    let qc = average_pool(query, w);
    let rc = average_pool(rendered, w);
    let sim = similarity(&qc.normalized_cells(), &rc.normalized_cells(), d);
    let coarse_volume = sim.len();
    let prob = pmm(&sim, temperature);
    let coarse: Vec<CoarseMatch<T>> = mutual_nn(&prob, p_min)
        .into_iter()
        .map(|(i, j)| CoarseMatch {
            query: (i % qc.width, i / qc.width),
            rendered: (j % rc.width, j / rc.width),
            prob: prob[(i, j)],
        })
        .collect();
    let qn = query.normalized_cells();
    let rn = rendered.normalized_cells();
    let fine: Vec<FineMatch<T>> = coarse
        .par_iter()
        .enumerate()
        .map(|(k, m)| {
            let qcells = window_cells(m.query, w, query.height, query.width);
            let rcells = window_cells(m.rendered, w, rendered.height, rendered.width);
            let qv = gather(&qn, d, query.width, &qcells);
            let rv = gather(&rn, d, rendered.width, &rcells);
            match_window(&qcells, &rcells, &qv, &rv, d, temperature, p_min, k)
        })
        .flatten()
        .collect();
    DenseMatchSet {
        coarse,
        fine,
        window: w,
        coarse_volume,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_pmm(sim: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let (r, c) = sim.shape();
        DMatrix::from_fn(r, c, |i, j| {
            let rs: f64 = (0..c).map(|k| (sim[(i, k)] / t).exp()).sum();
            let cs: f64 = (0..r).map(|k| (sim[(k, j)] / t).exp()).sum();
            (sim[(i, j)] / t).exp() / rs * (sim[(i, j)] / t).exp() / cs
        })
    }

    fn brute_mnn(p: &DMatrix<f64>, p_min: f64) -> Vec<(usize, usize)> {
        let (r, c) = p.shape();
        let mut out = Vec::new();
        for i in 0..r {
            for j in 0..c {
                let v = p[(i, j)];
                let row = (0..c).all(|k| k == j || p[(i, k)] < v);
                let col = (0..r).all(|k| k == i || p[(k, j)] < v);
                if row && col && v > p_min {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn singleton_is_certain() {
        for v in [-3.0, 0.0, 0.7] {
            for t in [0.01, 1.0] {
                let p = pmm(&DMatrix::from_element(1, 1, v), t);
                assert!((p[(0, 0)] - 1.0f64).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_by_two_identity() {
        let p = pmm(&DMatrix::<f64>::identity(2, 2), 1.0);
        let s = std::f64::consts::E / (std::f64::consts::E + 1.0);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { s * s } else { (1.0 - s) * (1.0 - s) };
                assert!((p[(i, j)] - want).abs() < 1e-12);
            }
        }
        assert!((p[(0, 0)] - 0.5344).abs() < 1e-4 && (p[(0, 1)] - 0.0723).abs() < 1e-4);
    }

    #[test]
    fn pmm_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (r, c) in [(8, 8), (3, 7), (5, 1)] {
            let sim = DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
            for t in [0.1, 0.5, 1.0] {
                let diff = (pmm(&sim, t) - brute_pmm(&sim, t)).abs().max();
                assert!(diff < 1e-9, "{r}x{c} t={t}: {diff}");
            }
        }
    }

    #[test]
    fn mnn_diagonal_and_exclusion() {
        let p = DMatrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, 0.1, 0.7, 0.1, 0.0, 0.1, 0.9f64]);
        assert_eq!(mutual_nn(&p, 0.05), vec![(0, 0), (1, 1), (2, 2)]);
        // row 1 peaks at column 0, but column 0 peaks at row 0
        let p = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.5, 0.2f64]);
        assert_eq!(mutual_nn(&p, 0.05), vec![(0, 0)]);
        assert!(mutual_nn(&p, 0.95).is_empty());
    }

    #[test]
    fn mnn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let sim = DMatrix::from_fn(10, 10, |_, _| rng.gen_range(-1.0..1.0));
            let p = pmm(&sim, 0.2);
            assert_eq!(mutual_nn(&p, 0.01), brute_mnn(&p, 0.01));
        }
        // ties are never strict maxima
        let p = DMatrix::from_element(2, 2, 0.25f64);
        assert!(mutual_nn(&p, 0.0).is_empty());
    }

    proptest! {
        #[test]
        fn pmm_bounded_by_both_softmaxes(vals in proptest::collection::vec(-2.0f64..2.0, 1..64), cols in 1usize..8, t in 0.05f64..2.0) {
            let rows = (vals.len() / cols).max(1);
            let n = rows * cols;
            prop_assume!(vals.len() >= n);
            let sim = DMatrix::from_row_slice(rows, cols, &vals[..n]);
            let p = pmm(&sim, t);
            for i in 0..rows {
                for j in 0..cols {
                    let v = p[(i, j)];
                    prop_assert!((0.0..=1.0).contains(&v));
                    let rs: f64 = (0..cols).map(|k| ((sim[(i, k)] - sim[(i, j)]) / t).exp()).sum();
                    let cs: f64 = (0..rows).map(|k| ((sim[(k, j)] - sim[(i, j)]) / t).exp()).sum();
                    prop_assert!(v <= 1.0 / rs + 1e-12 && v <= 1.0 / cs + 1e-12);
                }
            }
            let pairs = mutual_nn(&p, 0.0);
            let mut a: Vec<usize> = pairs.iter().map(|x| x.0).collect();
            let mut b: Vec<usize> = pairs.iter().map(|x| x.1).collect();
            a.dedup();
            b.sort();
            b.dedup();
            prop_assert_eq!(a.len(), pairs.len());
            prop_assert_eq!(b.len(), pairs.len());
        }
    }

    /// Random unit features per fine cell.
    fn random_map(rng: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> DenseFeatureMap<f64> {
        let mut m = DenseFeatureMap::zeros(d, h, w, 1);
        for v in m.data.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        m
    }

    /// A smooth, spatially varying field so neighbouring cells are similar but distinguishable.
    fn smooth_map(d: usize, h: usize, w: usize, shift: isize) -> DenseFeatureMap<f64> {
        let mut m = DenseFeatureMap::zeros(d, h, w, 1);
        for c in 0..d {
            let (fx, fy, ph) = (0.11 * (c as f64 + 1.0), 0.07 * (d - c) as f64, c as f64 * 0.9);
            for y in 0..h {
                for x in 0..w {
                    let xs = x as f64 + shift as f64;
                    m.set(c, y, x, (fx * xs + ph).sin() + (fy * y as f64 - ph).cos() + 0.3 * ((xs * y as f64) * 0.013 + c as f64).sin());
                }
            }
        }
        m
    }

    #[test]
    fn self_match_lands_on_identical_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_map(&mut rng, 32, 32, 40);
        let set = coarse_to_fine_match(&m, &m, 0.1, 0.05);
        assert_eq!(set.coarse.len(), 4 * 5);
        for c in &set.coarse {
            assert_eq!(c.query, c.rendered);
        }
        assert!(!set.fine.is_empty());
        for f in &set.fine {
            let d = f.query - f.rendered;
            assert!(d.x.abs() < 0.1 && d.y.abs() < 0.1, "{f:?}");
        }
    }

    #[test]
    fn window_shift_moves_coarse_matches_by_one_cell() {
        let (h, w) = (32, 48);
        // rendered(x) = query(x + 8): content at query cell cx appears at rendered cell cx - 1
        let q = smooth_map(12, h, w + 8, 0);
        let r_full = smooth_map(12, h, w + 8, 8);
        let crop = |m: &DenseFeatureMap<f64>| {
            let mut o = DenseFeatureMap::zeros(m.dim, h, w, 1);
            for c in 0..m.dim {
                for y in 0..h {
                    for x in 0..w {
                        o.set(c, y, x, m.get(c, y, x));
                    }
                }
            }
            o
        };
        let (q, r) = (crop(&q), crop(&r_full));
        let set = coarse_to_fine_match(&q, &r, 0.1, 0.05);
        assert!(set.coarse.len() >= 4, "{}", set.coarse.len());
        for c in &set.coarse {
            assert_eq!(c.rendered.0 + 1, c.query.0, "{c:?}");
            assert_eq!(c.rendered.1, c.query.1);
        }
    }

    #[test]
    fn coarse_stage_reduces_search_volume_4096_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random_map(&mut rng, 8, 64, 64);
        let set = coarse_to_fine_match(&m, &m, 0.1, 0.05);
        let fine_volume = (64 * 64) * (64 * 64);
        assert_eq!(set.coarse_volume, 64 * 64);
        assert_eq!(fine_volume / set.coarse_volume, 4096);
    }

    #[test]
    fn windowed_equals_global_restricted() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_map(&mut rng, 16, 16, 24);
        let set = coarse_to_fine_match(&q, &q, 0.2, 0.05);
        let d = q.dim;
        let qn = q.normalized_cells();
        let global = similarity(&qn, &qn, d);
        for (k, c) in set.coarse.iter().enumerate() {
            let qc = window_cells(c.query, WINDOW, q.height, q.width);
            let rc = window_cells(c.rendered, WINDOW, q.height, q.width);
            let idx = |cells: &[(usize, usize)]| cells.iter().map(|&(x, y)| y * q.width + x).collect::<Vec<_>>();
            let (qi, ri) = (idx(&qc), idx(&rc));
            let block = DMatrix::from_fn(qi.len(), ri.len(), |a, b| global[(qi[a], ri[b])]);
            let want: Vec<(usize, usize)> = mutual_nn(&pmm(&block, 0.2), 0.05)
                .into_iter()
                .map(|(a, b)| (qi[a], ri[b]))
                .collect();
            let got: Vec<(usize, usize)> = set
                .fine
                .iter()
                .filter(|f| f.parent == k)
                .map(|f| {
                    let cell = |v: &Vector2<f64>| v.y.round() as usize * q.width + v.x.round() as usize;
                    (cell(&f.query), cell(&f.rendered))
                })
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn pooling_handles_ragged_edges() {
        let mut m = DenseFeatureMap::<f64>::zeros(1, 10, 9, 2);
        for y in 0..10 {
            for x in 0..9 {
                m.set(0, y, x, (y * 9 + x) as f64);
            }
        }
        let p = average_pool(&m, 8);
        assert_eq!((p.height, p.width, p.stride), (2, 2, 16));
        // bottom-right window holds rows 8..10, column 8
        assert!((p.get(0, 1, 1) - (8.0 * 9.0 + 8.0 + 9.0 * 9.0 + 8.0) / 2.0).abs() < 1e-12);
    }
}
