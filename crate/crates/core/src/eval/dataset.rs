//! Dataset directory layout and result files.
//!
//! ```text
//! dir/scene.ply  views/{id}.ppm  poses.json  intrinsics.json  split.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::synth::{Split, SyntheticDataset, SyntheticView};
use super::EvalError;
use crate::dense::LocalizationResult;
use crate::geometry::{CameraIntrinsics, Pose, PoseRecord};
use crate::image::{load_ppm, save_ppm};
use crate::scene::{load_scene, save_scene};

pub const SCENE_FILE: &str = "scene.ply";
pub const POSES_FILE: &str = "poses.json";
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const SPLIT_FILE: &str = "split.json";
pub const VIEWS_DIR: &str = "views";

fn io_err(path: &Path, e: impl std::fmt::Display) -> EvalError {
    EvalError::Io(format!("{}: {e}", path.display()))
}

pub fn write_json<V: Serialize + ?Sized>(path: &Path, value: &V) -> Result<(), EvalError> {
    let f = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value).map_err(|e| io_err(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V, EvalError> {
    let f = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| EvalError::Format(format!("{}: {e}", path.display())))
}

pub fn view_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(VIEWS_DIR).join(format!("{id}.ppm"))
}

pub fn save_dataset(ds: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<(), EvalError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(VIEWS_DIR)).map_err(|e| io_err(dir, e))?;
    let scene_path = dir.join(SCENE_FILE);
    save_scene(&ds.scene, &scene_path).map_err(|e| io_err(&scene_path, e))?;
    let mut poses = BTreeMap::new();
    for v in &ds.views {
        let p = view_path(dir, &v.id);
        save_ppm(&v.image, &p).map_err(|e| io_err(&p, e))?;
        poses.insert(v.id.clone(), PoseRecord::from(&v.pose));
    }
    write_json(&dir.join(POSES_FILE), &poses)?;
    write_json(&dir.join(INTRINSICS_FILE), &ds.intrinsics)?;
    write_json(&dir.join(SPLIT_FILE), &ds.split)
}

pub fn load_poses(dir: &Path) -> Result<BTreeMap<String, Pose<f64>>, EvalError> {
    let path = dir.join(POSES_FILE);
    let recs: BTreeMap<String, PoseRecord> = read_json(&path)?;
    recs.into_iter()
        .map(|(id, r)| {
            let p = r.to_pose().map_err(|e| EvalError::Format(format!("{}: pose {id}: {e}", path.display())))?;
            Ok((id, p))
        })
        .collect()
}

pub fn load_intrinsics(dir: &Path) -> Result<CameraIntrinsics<f64>, EvalError> {
    let path = dir.join(INTRINSICS_FILE);
    let k: CameraIntrinsics<f64> = read_json(&path)?;
    CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)
        .map_err(|e| EvalError::Format(format!("{}: {e}", path.display())))
}

/// Loads views, poses, intrinsics and split; the scene is loaded from `scene.ply`
/// unless `with_scene` is false, in which case it is left empty.
pub fn load_dataset(dir: impl AsRef<Path>, with_scene: bool) -> Result<SyntheticDataset, EvalError> {
    let dir = dir.as_ref();
    let poses = load_poses(dir)?;
    let intrinsics = load_intrinsics(dir)?;
    let split: Split = read_json(&dir.join(SPLIT_FILE))?;
    for id in split.train.iter().chain(&split.query) {
        if !poses.contains_key(id) {
            return Err(EvalError::IdMismatch(format!("split lists {id:?} which has no pose")));
        }
    }
    let mut views = Vec::with_capacity(poses.len());
    for (id, pose) in poses {
        let p = view_path(dir, &id);
        let image = load_ppm(&p).map_err(|e| io_err(&p, e))?;
        if image.width != intrinsics.width || image.height != intrinsics.height {
            return Err(EvalError::Format(format!(
                "{}: image is {}x{}, intrinsics say {}x{}",
                p.display(),
                image.width,
                image.height,
                intrinsics.width,
                intrinsics.height
            )));
        }
        views.push(SyntheticView { id, pose, image });
    }
    let scene = if with_scene {
        let p = dir.join(SCENE_FILE);
        load_scene(&p).map_err(|e| io_err(&p, e))?
    } else {
        crate::scene::FeatureGaussianScene::new(0)
    };
    Ok(SyntheticDataset {
        scene,
        intrinsics,
        views,
        split,
    })
}

/// One entry of `results.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    #[serde(flatten)]
    pub result: LocalizationResult<f64>,
}

impl QueryResult {
    pub fn outcome(&self) -> super::QueryOutcome {
        super::QueryOutcome {
            id: self.query_id.clone(),
            estimate: self.result.best_pose(),
            reliable: self.result.is_reliable(),
        }
    }
}

pub fn save_results(results: &[QueryResult], path: impl AsRef<Path>) -> Result<(), EvalError> {
    write_json(path.as_ref(), results)
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<QueryResult>, EvalError> {
    read_json(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::synth::{synth_scene, SyntheticSceneSpec};

    fn small() -> SyntheticDataset {
        synth_scene(&SyntheticSceneSpec {
            gaussian_count: 400,
            view_count: 5,
            image_size: [48, 40],
            min_visible: 20,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_preserves_views_and_split() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path(), true).unwrap();
        assert_eq!(back.split, ds.split);
        assert_eq!(back.intrinsics, ds.intrinsics);
        assert_eq!(back.scene.len(), ds.scene.len());
        for v in &ds.views {
            let w = back.view(&v.id).unwrap();
            // images are already 8-bit quantized, so PPM is lossless
            assert_eq!(w.image, v.image);
            assert!(crate::geometry::pose_difference(&w.pose, &v.pose).angular_deg < 1e-9);
        }
    }

    #[test]
    fn split_referencing_unknown_view_is_rejected() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let mut split = ds.split.clone();
        split.query.push("9999".into());
        write_json(&dir.path().join(SPLIT_FILE), &split).unwrap();
        assert!(matches!(load_dataset(dir.path(), false), Err(EvalError::IdMismatch(_))));
    }

    #[test]
    fn missing_directory_is_io_error() {
        assert!(matches!(load_dataset("/nonexistent/ds", false), Err(EvalError::Io(_))));
    }

    #[test]
    fn results_round_trip() {
        let ds = small();
        let pose = ds.views[0].pose;
        let r = QueryResult {
            query_id: "0004".into(),
            result: LocalizationResult::failed("sparse: too few matches".into(), 1.5),
        };
        let mut ok = r.clone();
        ok.query_id = "0003".into();
        ok.result.initial_pose = Some(pose);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.json");
        save_results(&[ok, r], &path).unwrap();
        let back = load_results(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].query_id, "0004");
        assert!(back[1].outcome().estimate.is_none());
        let txt = fs::read_to_string(&path).unwrap();
        assert!(txt.contains("\"query_id\": \"0003\""));
    }
}
