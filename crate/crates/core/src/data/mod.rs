//! Frames, the KITTI directory layout, the synthetic scene generator and
//! training-time augmentation.

pub mod augment;
pub mod kitti;
pub mod synth;
pub mod velodyne;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentCfg, GtDatabase};
pub use kitti::{Calib, KittiRecord};
pub use synth::{synth_scene, SynthScene, SynthSceneCfg};
pub use velodyne::{read_velodyne, write_velodyne};

use crate::error::{Error, Result};
use crate::eval::{kitti_difficulty, synthetic_difficulty, Difficulty, EvalObject};
use crate::geometry::Box3D;
use crate::grid::BevGrid;
use crate::labels::ShapeHeatmap;
use crate::pillars::Point;

pub const CLASS_NAMES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];
pub const DONT_CARE: &str = "DontCare";

pub fn class_id(name: &str) -> Option<usize> {
    CLASS_NAMES.iter().position(|&c| c == name)
}

pub fn class_name(id: usize) -> &'static str {
    CLASS_NAMES.get(id).copied().unwrap_or("Unknown")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Object {
    pub class_id: usize,
    pub bbox: Box3D,
    pub truncation: f64,
    /// KITTI occlusion level `0..=3`.
    pub occlusion: i32,
    /// Image box height in pixels.
    pub bbox_height: f64,
    /// Region that absorbs detections without counting (`DontCare`).
    pub ignore: bool,
}

/// How gt objects are bucketed into difficulties.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyRule {
    /// Image box height, occlusion level and truncation.
    Kitti,
    /// Range and occlusion level, for scenes without images.
    Synthetic,
}

/// Occlusion level for a synthetic object whose `fraction` of surface returns
/// are blocked. Levels 0/1 split at the easy and moderate limits.
pub fn occlusion_level(fraction: f64) -> i32 {
    if fraction < 0.2 {
        0
    } else if fraction < 0.5 {
        1
    } else if fraction < 1.0 {
        2
    } else {
        3
    }
}

impl Object {
    pub fn difficulty(&self, rule: DifficultyRule) -> Option<Difficulty> {
        match rule {
            DifficultyRule::Kitti => kitti_difficulty(self.bbox_height, self.occlusion.max(0) as u8, self.truncation),
            DifficultyRule::Synthetic => {
                // level 0 → below 0.2, level 1 → below 0.5
                let fraction = match self.occlusion {
                    0 => 0.0,
                    1 => 0.2,
                    _ => 1.0,
                };
                Some(synthetic_difficulty(self.bbox.x.hypot(self.bbox.y), fraction))
            }
        }
    }

    pub fn to_eval(&self, rule: DifficultyRule) -> EvalObject {
        EvalObject {
            class_id: self.class_id,
            bbox: self.bbox,
            difficulty: if self.ignore { None } else { self.difficulty(rule) },
            ignore: self.ignore,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub id: u64,
    pub points: Vec<Point>,
    pub objects: Vec<Object>,
    pub calib: Calib,
}

impl Frame {
    /// Labeled objects (not ignore regions) as `(class, box)`.
    pub fn labeled(&self) -> Vec<(usize, Box3D)> {
        self.objects
            .iter()
            .filter(|o| !o.ignore)
            .map(|o| (o.class_id, o.bbox))
            .collect()
    }

    pub fn xyz(&self) -> Vec<[f64; 3]> {
        self.points.iter().map(|p| [p[0], p[1], p[2]]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for p in &self.points {
            if !p.iter().all(|v| v.is_finite()) || !(0.0..=1.0).contains(&p[3]) {
                return Err(Error::InvalidInput(format!(
                    "frame {}: point {p:?} is not finite or has reflectance outside [0, 1]",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

fn objects_from_records(records: &[KittiRecord], calib: &Calib) -> Result<Vec<Object>> {
    let mut out = Vec::new();
    for r in records {
        let ignore = r.class == DONT_CARE;
        let Some(class) = class_id(&r.class).or(ignore.then_some(usize::MAX)) else {
            continue;
        };
        out.push(Object {
            class_id: class,
            bbox: r.to_box(calib)?,
            truncation: r.truncation,
            occlusion: r.occlusion,
            bbox_height: r.bbox2d[3] - r.bbox2d[1],
            ignore,
        });
    }
    Ok(out)
}

/// Objects of one label file in the LiDAR frame. Classes outside
/// [`CLASS_NAMES`] are skipped; `DontCare` becomes an ignore region.
pub fn read_labels(path: &Path, calib: &Calib) -> Result<Vec<Object>> {
    objects_from_records(&kitti::read_records(path)?, calib)
}

pub fn object_record(o: &Object, calib: &Calib) -> KittiRecord {
    let name = if o.ignore { DONT_CARE } else { class_name(o.class_id) };
    let mut r = KittiRecord::from_box(name, &o.bbox, calib, None);
    r.truncation = o.truncation;
    r.occlusion = o.occlusion;
    r
}

/// `velodyne/`, `label_2/`, `calib/` plus generated `shape/` heatmaps and the
/// synthetic `shape_bank.bin`.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir { root: root.into() }
    }

    pub fn velodyne(&self, id: u64) -> PathBuf {
        self.root.join("velodyne").join(format!("{id:06}.bin"))
    }

    pub fn label(&self, id: u64) -> PathBuf {
        self.root.join("label_2").join(format!("{id:06}.txt"))
    }

    pub fn calib(&self, id: u64) -> PathBuf {
        self.root.join("calib").join(format!("{id:06}.txt"))
    }

    pub fn shape(&self, id: u64) -> PathBuf {
        self.root.join("shape").join(format!("{id:06}.bsh"))
    }

    pub fn bank(&self) -> PathBuf {
        self.root.join("shape_bank.bin")
    }

    pub fn create(&self) -> Result<()> {
        for d in ["velodyne", "label_2", "calib", "shape"] {
            let p = self.root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    /// Frame ids present under `velodyne/`, ascending.
    pub fn frame_ids(&self) -> Result<Vec<u64>> {
        let dir = self.root.join("velodyne");
        let mut ids = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".bin") {
                if let Ok(id) = stem.parse::<u64>() {
                    ids.push(id);
                }
            }
        }
        ids.sort_unstable();
        if ids.is_empty() {
            return Err(Error::Format {
                path: dir,
                message: "no scans found".into(),
            });
        }
        Ok(ids)
    }

    pub fn load_frame(&self, id: u64) -> Result<Frame> {
        let calib = Calib::load(&self.calib(id))?;
        let label_path = self.label(id);
        let objects = if label_path.exists() {
            read_labels(&label_path, &calib)?
        } else {
            Vec::new()
        };
        let frame = Frame {
            id,
            points: read_velodyne(&self.velodyne(id))?,
            objects,
            calib,
        };
        frame.validate().map_err(|e| Error::Format {
            path: self.velodyne(id),
            message: e.to_string(),
        })?;
        Ok(frame)
    }

    pub fn save_frame(&self, frame: &Frame) -> Result<()> {
        write_velodyne(&self.velodyne(frame.id), &frame.points)?;
        frame.calib.save(&self.calib(frame.id))?;
        let records: Vec<KittiRecord> = frame.objects.iter().map(|o| object_record(o, &frame.calib)).collect();
        kitti::write_records(&self.label(frame.id), &records)
    }

    pub fn load_shape(&self, id: u64, grid: &BevGrid) -> Result<ShapeHeatmap> {
        ShapeHeatmap::load(&self.shape(id), grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dont_care_becomes_ignore_region() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10\n\
                    Van 0 0 0 0 0 0 0 2 2 5 0 1.7 20 0\n";
        let recs = kitti::parse_records(text, Path::new("l.txt")).unwrap();
        let objs = objects_from_records(&recs, &Calib::synthetic()).unwrap();
        assert_eq!(objs.len(), 1);
        assert!(objs[0].ignore);
        assert!(objs[0].to_eval(DifficultyRule::Kitti).difficulty.is_none());
    }

    #[test]
    fn frame_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = DatasetDir::new(dir.path());
        ds.create().unwrap();
        let mut points = vec![[1.0, 2.0, -1.0, 0.5], [3.5, -0.25, 0.0, 0.0]];
        velodyne::quantize(&mut points);
        let frame = Frame {
            id: 7,
            points,
            objects: vec![Object {
                class_id: 0,
                bbox: Box3D::new(10.0, 1.0, -0.95, 3.9, 1.6, 1.56, 0.3),
                truncation: 0.0,
                occlusion: 1,
                bbox_height: 0.0,
                ignore: false,
            }],
            calib: Calib::synthetic(),
        };
        ds.save_frame(&frame).unwrap();
        assert_eq!(ds.frame_ids().unwrap(), vec![7]);
        let back = ds.load_frame(7).unwrap();
        assert_eq!(back.points, frame.points);
        let (a, b) = (frame.objects[0].bbox, back.objects[0].bbox);
        assert!((a.x - b.x).abs() < 1e-12 && (a.theta - b.theta).abs() < 1e-12);
        assert_eq!(back.objects[0].occlusion, 1);
    }

    #[test]
    fn synthetic_buckets_from_level() {
        let mut o = Object {
            class_id: 0,
            bbox: Box3D::new(10.0, 0.0, -0.95, 3.9, 1.6, 1.56, 0.0),
            truncation: 0.0,
            occlusion: occlusion_level(0.1),
            bbox_height: 0.0,
            ignore: false,
        };
        assert_eq!(o.difficulty(DifficultyRule::Synthetic), Some(Difficulty::Easy));
        o.occlusion = occlusion_level(0.3);
        assert_eq!(o.difficulty(DifficultyRule::Synthetic), Some(Difficulty::Moderate));
        o.occlusion = occlusion_level(0.7);
        assert_eq!(o.difficulty(DifficultyRule::Synthetic), Some(Difficulty::Hard));
    }
}
