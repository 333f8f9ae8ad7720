use nalgebra::Vector3;

use crate::scalar::{total_cmp, Scalar};
use crate::scene::{partition_scene, FeatureGaussianScene, ScenePartition};

/// Exact k-nearest-neighbour queries over primitive centers, bucketed on a cubic grid.
pub struct GridKnn<T: Scalar> {
    centers: Vec<Vector3<T>>,
    grid: ScenePartition<T>,
    cell: T,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<T: Scalar> GridKnn<T> {
    /// Cell side is chosen so a cell holds about `k` centers on average.
    pub fn new(scene: &FeatureGaussianScene<T>, k: usize) -> Self {
        let centers = scene.centers();
        let cell = match scene.bounds() {
            Some(b) if scene.len() > 1 => {
                let ext = b.extent();
                let big = ext.max().max(T::lit(1e-9));
                let floor = big * T::lit(1e-3);
                let vol = ext.iter().fold(T::one(), |a, s| a * s.max(floor));
                let per = T::lit(k.max(1) as f64 / scene.len() as f64);
                (vol * per).powf(T::lit(1.0 / 3.0)).max(floor)
            }
            _ => T::one(),
        };
        let grid = partition_scene(scene, Vector3::repeat(cell)).expect("positive cell size");
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for id in grid.cells.keys() {
            for a in 0..3 {
                lo[a] = lo[a].min(id[a]);
                hi[a] = hi[a].max(id[a]);
            }
        }
        Self {
            centers,
            grid,
            cell,
            lo,
            hi,
        }
    }

    /// The `k` nearest primitives to primitive `i`, itself first, then by
    /// ascending distance with ties broken by lower index.
    pub fn neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        let q = self.centers[i];
        let home = self.grid.cell_of(&q);
        if k <= 1 {
            return vec![i];
        }
        let mut found: Vec<(T, usize)> = Vec::new();
        let max_ring = (0..3)
            .map(|a| (home[a] - self.lo[a]).max(self.hi[a] - home[a]))
            .max()
            .unwrap_or(0)
            .max(0);
        for r in 0..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let id = [home[0] + dx, home[1] + dy, home[2] + dz];
                        if let Some(members) = self.grid.cells.get(&id) {
                            for &j in members {
                                if j != i {
                                    found.push(((self.centers[j] - q).norm_squared(), j));
                                }
                            }
                        }
                    }
                }
            }
            if found.len() + 1 >= k {
                found.sort_by(|a, b| total_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
                let kth = found[k - 2].0;
                let bound = self.cell * T::from_usize_lossy(r as usize);
                // anything outside the scanned shells lies farther than r cells
                if kth < bound * bound {
                    break;
                }
            }
        }
        found.sort_by(|a, b| total_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
        let mut out = Vec::with_capacity(k);
        out.push(i);
        out.extend(found.into_iter().take(k - 1).map(|(_, j)| j));
        out
    }
}

/// Reference kNN over the full pairwise distance list.
pub fn brute_force_neighbors<T: Scalar>(centers: &[Vector3<T>], i: usize, k: usize) -> Vec<usize> {
    let mut d: Vec<(T, usize)> = (0..centers.len())
        .filter(|j| *j != i)
        .map(|j| ((centers[j] - centers[i]).norm_squared(), j))
        .collect();
    d.sort_by(|a, b| total_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
    std::iter::once(i).chain(d.into_iter().map(|(_, j)| j)).take(k.max(1)).collect()
}
