//! Uniform grid partitioning of scene primitives.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;

use super::{FeatureGaussianScene, SceneError};
use crate::geometry::{project_points, CameraIntrinsics, Pose};
use crate::scalar::Scalar;

pub type CellId = [i64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct ScenePartition<T: Scalar> {
    pub cell_size: Vector3<T>,
    pub cells: BTreeMap<CellId, Vec<usize>>,
    pub view_assignment: BTreeMap<usize, Vec<CellId>>,
}

impl<T: Scalar> ScenePartition<T> {
    pub fn cell_of(&self, p: &Vector3<T>) -> CellId {
        cell_of(p, &self.cell_size)
    }

    pub fn total(&self) -> usize {
        self.cells.values().map(Vec::len).sum()
    }

    /// Records, for each view, the cells holding at least one primitive that projects in bounds.
    pub fn assign_views(
        &mut self,
        scene: &FeatureGaussianScene<T>,
        views: &[(usize, Pose<T>, CameraIntrinsics<T>)],
    ) {
        let centers = scene.centers();
        for (id, pose, k) in views {
            let proj = project_points(&centers, pose, k);
            let mut seen = BTreeSet::new();
            for (cell, members) in &self.cells {
                if members.iter().any(|&i| proj.in_bounds[i]) {
                    seen.insert(*cell);
                }
            }
            self.view_assignment.insert(*id, seen.into_iter().collect());
        }
    }

    /// Union of the primitive index sets of `cells`, ascending.
    pub fn merge(&self, cells: &[CellId]) -> Vec<usize> {
        let mut out: Vec<usize> = cells
            .iter()
            .filter_map(|c| self.cells.get(c))
            .flatten()
            .copied()
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn cell_of<T: Scalar>(p: &Vector3<T>, size: &Vector3<T>) -> CellId {
    [0, 1, 2].map(|a| (p[a] / size[a]).floor().as_f64() as i64)
}

/// Assigns every primitive to the grid cell containing its center.
pub fn partition_scene<T: Scalar>(
    scene: &FeatureGaussianScene<T>,
    cell_size: Vector3<T>,
) -> Result<ScenePartition<T>, SceneError> {
    if cell_size.iter().any(|v| !(*v > T::zero()) || !v.is_finite()) {
        return Err(SceneError::CellSize);
    }
    let mut cells: BTreeMap<CellId, Vec<usize>> = BTreeMap::new();
    for (i, p) in scene.primitives.iter().enumerate() {
        cells.entry(cell_of(&p.center, &cell_size)).or_default().push(i);
    }
    Ok(ScenePartition {
        cell_size,
        cells,
        view_assignment: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::GaussianPrimitive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scene_at(points: &[[f64; 3]]) -> FeatureGaussianScene<f64> {
        let mut s = FeatureGaussianScene::new(1);
        for p in points {
            s.primitives.push(GaussianPrimitive::isotropic(
                Vector3::from(*p),
                0.1,
                0.5,
                Vector3::repeat(0.5),
                vec![0.0],
            ));
        }
        s
    }

    #[test]
    fn single_cell() {
        let s = scene_at(&[[0.1, 0.2, 0.3], [0.9, 0.5, 0.2], [0.4, 0.4, 0.4]]);
        let p = partition_scene(&s, Vector3::repeat(1.0)).unwrap();
        assert_eq!(p.cells.len(), 1);
        assert_eq!(p.total(), 3);
    }

    #[test]
    fn distant_clusters_occupy_non_adjacent_cells() {
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for c in [0.0, 100.0] {
            for _ in 0..20 {
                pts.push([c + 2.0 + rng.gen_range(0.0..5.0), 3.0 + rng.gen_range(0.0..5.0), 1.0]);
            }
        }
        let p = partition_scene(&scene_at(&pts), Vector3::repeat(10.0)).unwrap();
        let ids: Vec<_> = p.cells.keys().copied().collect();
        assert_eq!(ids.len(), 2);
        assert!((ids[0][0] - ids[1][0]).abs() > 1);
    }

    #[test]
    fn conservation_on_random_scenes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.gen_range(1..300);
            let pts: Vec<_> = (0..n)
                .map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)])
                .collect();
            let p = partition_scene(&scene_at(&pts), Vector3::new(3.0, 5.0, 7.0)).unwrap();
            assert_eq!(p.total(), n);
            let all = p.merge(&p.cells.keys().copied().collect::<Vec<_>>());
            assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn rejects_non_positive_cell_size() {
        let s = scene_at(&[[0.0; 3]]);
        assert!(partition_scene(&s, Vector3::new(1.0, 0.0, 1.0)).is_err());
    }

    #[test]
    fn views_are_assigned_to_visible_cells() {
        let s = scene_at(&[[0.0, 0.0, 5.0], [50.0, 0.0, 5.0]]);
        let mut p = partition_scene(&s, Vector3::repeat(10.0)).unwrap();
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        p.assign_views(&s, &[(0, Pose::identity(), k)]);
        assert_eq!(p.view_assignment[&0], vec![[0, 0, 0]]);
    }
}
