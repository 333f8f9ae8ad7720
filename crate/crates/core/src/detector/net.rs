//! Forward and backward passes of the three-layer detector head.
//!
//! Convolutions run as im2col followed by a dense matrix product. Training
//! evaluates the network only at sampled cells: each output needs the 3×3
//! hidden neighbourhood of layer one, i.e. a 5×5 input patch.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::DetectorParams;
use crate::features::DenseFeatureMap;
use crate::scalar::Scalar;

/// Cell-level training example: map index, row, column, label, loss weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellSample<T: Scalar> {
    pub map: usize,
    pub y: usize,
    pub x: usize,
    pub label: T,
    pub weight: T,
}

pub(crate) struct Mats<T: Scalar> {
    pub w1: DMatrix<T>,
    pub b1: Vec<T>,
    pub w2: DMatrix<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: T,
}

impl<T: Scalar> Mats<T> {
    pub fn new(p: &DetectorParams<T>) -> Self {
        let (d, h) = (p.in_dim, p.hidden);
        Self {
            w1: DMatrix::from_row_slice(h, d * 9, &p.w1),
            b1: p.b1.clone(),
            w2: DMatrix::from_row_slice(h, h * 9, &p.w2),
            b2: p.b2.clone(),
            w3: p.w3.clone(),
            b3: p.b3,
        }
    }
}

#[inline]
fn relu<T: Scalar>(v: T) -> T {
    v.max(T::zero())
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy from a logit, stable for large |z|.
#[inline]
pub(crate) fn bce_logit<T: Scalar>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln()
}

/// Writes the 3×3 zero-padded window of `map` around `(y, x)` into `col` in `(c, ky, kx)` order.
fn im2col_at<T: Scalar>(map: &DenseFeatureMap<T>, y: isize, x: isize, col: &mut [T]) {
    let (h, w) = (map.height as isize, map.width as isize);
    let mut i = 0;
    for c in 0..map.dim {
        let base = c * map.height * map.width;
        for ky in -1..=1 {
            for kx in -1..=1 {
                let (yy, xx) = (y + ky, x + kx);
                col[i] = if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    map.data[base + (yy * w + xx) as usize]
                } else {
                    T::zero()
                };
                i += 1;
            }
        }
    }
}

/// Logits for every cell of `map`, row-major.
pub(crate) fn forward_full<T: Scalar>(m: &Mats<T>, map: &DenseFeatureMap<T>) -> Vec<T> {
    let (h, w, d) = (map.height, map.width, map.dim);
    let hid = m.b1.len();
    let n = h * w;
    if n == 0 {
        return Vec::new();
    }
    // hidden layer one, channel-major, computed in row chunks
    let mut h1 = DenseFeatureMap::zeros(hid, h, w, map.stride);
    let rows_per = (4096 / w.max(1)).max(1);
    for y0 in (0..h).step_by(rows_per) {
        let y1 = (y0 + rows_per).min(h);
        let cols = (y1 - y0) * w;
        let mut c1 = DMatrix::<T>::zeros(d * 9, cols);
        for y in y0..y1 {
            for x in 0..w {
                let j = (y - y0) * w + x;
                im2col_at(map, y as isize, x as isize, c1.column_mut(j).as_mut_slice());
            }
        }
        let z1 = &m.w1 * c1;
        for j in 0..cols {
            let p = y0 * w + j;
            for o in 0..hid {
                h1.data[o * n + p] = relu(z1[(o, j)] + m.b1[o]);
            }
        }
    }
    let mut out = vec![T::zero(); n];
    for y0 in (0..h).step_by(rows_per) {
        let y1 = (y0 + rows_per).min(h);
        let cols = (y1 - y0) * w;
        let mut c2 = DMatrix::<T>::zeros(hid * 9, cols);
        for y in y0..y1 {
            for x in 0..w {
                let j = (y - y0) * w + x;
                im2col_at(&h1, y as isize, x as isize, c2.column_mut(j).as_mut_slice());
            }
        }
        let z2 = &m.w2 * c2;
        for j in 0..cols {
            let mut z = m.b3;
            for o in 0..hid {
                z += m.w3[o] * relu(z2[(o, j)] + m.b2[o]);
            }
            out[y0 * w + j] = z;
        }
    }
    out
}

/// Flat gradient in the parameter order of [`DetectorParams::to_flat`].
pub(crate) struct Grad<T: Scalar> {
    pub w1: DMatrix<T>,
    pub b1: Vec<T>,
    pub w2: DMatrix<T>,
    pub b2: Vec<T>,
    pub w3: Vec<T>,
    pub b3: T,
}

impl<T: Scalar> Grad<T> {
    pub fn flat(&self) -> Vec<T> {
        let mut v = Vec::new();
        for r in 0..self.w1.nrows() {
            v.extend(self.w1.row(r).iter().copied());
        }
        v.extend(&self.b1);
        for r in 0..self.w2.nrows() {
            v.extend(self.w2.row(r).iter().copied());
        }
        v.extend(&self.b2);
        v.extend(&self.w3);
        v.push(self.b3);
        v
    }
}

/// Weighted BCE sum over `cells` and its gradient (unnormalized).
pub(crate) fn cells_loss_grad<T: Scalar>(
    m: &Mats<T>,
    maps: &[DenseFeatureMap<T>],
    cells: &[CellSample<T>],
    want_grad: bool,
) -> (T, Option<Grad<T>>) {
    let b = cells.len();
    let hid = m.b1.len();
    let d = m.w1.ncols() / 9;
    if b == 0 {
        return (T::zero(), None);
    }
    // layer one at the 3×3 neighbourhood of every cell; masked outside the map
    let mut c1 = DMatrix::<T>::zeros(d * 9, b * 9);
    let mut valid = vec![false; b * 9];
    for (s, cs) in cells.iter().enumerate() {
        let map = &maps[cs.map];
        for k in 0..9 {
            let (yy, xx) = (cs.y as isize + k as isize / 3 - 1, cs.x as isize + k as isize % 3 - 1);
            if yy >= 0 && (yy as usize) < map.height && xx >= 0 && (xx as usize) < map.width {
                valid[s * 9 + k] = true;
                im2col_at(map, yy, xx, c1.column_mut(s * 9 + k).as_mut_slice());
            }
        }
    }
    let mut h1 = &m.w1 * &c1;
    for j in 0..b * 9 {
        for o in 0..hid {
            h1[(o, j)] = if valid[j] { relu(h1[(o, j)] + m.b1[o]) } else { T::zero() };
        }
    }
    // layer two at the cell itself
    let mut c2 = DMatrix::<T>::zeros(hid * 9, b);
    for s in 0..b {
        for c in 0..hid {
            for k in 0..9 {
                c2[(c * 9 + k, s)] = h1[(c, s * 9 + k)];
            }
        }
    }
    let mut h2 = &m.w2 * &c2;
    let mut loss = T::zero();
    let mut dz3 = vec![T::zero(); b];
    for s in 0..b {
        let mut z = m.b3;
        for o in 0..hid {
            h2[(o, s)] = relu(h2[(o, s)] + m.b2[o]);
            z += m.w3[o] * h2[(o, s)];
        }
        let cs = &cells[s];
        loss += cs.weight * bce_logit(z, cs.label);
        dz3[s] = cs.weight * (sigmoid(z) - cs.label);
    }
    if !want_grad {
        return (loss, None);
    }
    let mut gw3 = vec![T::zero(); hid];
    let mut gb3 = T::zero();
    let mut dz2 = DMatrix::<T>::zeros(hid, b);
    for s in 0..b {
        gb3 += dz3[s];
        for o in 0..hid {
            gw3[o] += dz3[s] * h2[(o, s)];
            if h2[(o, s)] > T::zero() {
                dz2[(o, s)] = m.w3[o] * dz3[s];
            }
        }
    }
    let gw2 = &dz2 * c2.transpose();
    let gb2: Vec<T> = (0..hid).map(|o| dz2.row(o).sum()).collect();
    let dc2 = m.w2.transpose() * &dz2;
    let mut dz1 = DMatrix::<T>::zeros(hid, b * 9);
    for s in 0..b {
        for c in 0..hid {
            for k in 0..9 {
                let j = s * 9 + k;
                if h1[(c, j)] > T::zero() {
                    dz1[(c, j)] = dc2[(c * 9 + k, s)];
                }
            }
        }
    }
    let gw1 = &dz1 * c1.transpose();
    let gb1: Vec<T> = (0..hid).map(|o| dz1.row(o).sum()).collect();
    (
        loss,
        Some(Grad {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
            w3: gw3,
            b3: gb3,
        }),
    )
}
