//! Training-time augmentation: ground-truth sampling, then flip, rotation and
//! scaling applied to points and boxes together.

use std::f64::consts::FRAC_PI_4;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Frame, Object};
use crate::geometry::{bev_iou, normalize_angle, Box3D};
use crate::pillars::Point;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentCfg {
    /// Database objects tried per frame.
    pub gt_samples: usize,
    pub flip_probability: f64,
    /// Rotation angle drawn from `[-rotation, rotation]` radians.
    pub rotation: f64,
    pub scale: (f64, f64),
}

impl Default for AugmentCfg {
    fn default() -> Self {
        AugmentCfg {
            gt_samples: 15,
            flip_probability: 0.5,
            rotation: FRAC_PI_4,
            scale: (0.95, 1.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbEntry {
    pub object: Object,
    pub points: Vec<Point>,
    pub source: u64,
}

/// Labeled objects and their points, collected from training frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GtDatabase {
    pub entries: Vec<DbEntry>,
}

impl GtDatabase {
    pub fn from_frames<'a>(frames: impl IntoIterator<Item = &'a Frame>) -> Self {
        let mut entries = Vec::new();
        for f in frames {
            for o in f.objects.iter().filter(|o| !o.ignore) {
                let points: Vec<Point> = f
                    .points
                    .iter()
                    .copied()
                    .filter(|p| o.bbox.contains_point([p[0], p[1], p[2]]))
                    .collect();
                if !points.is_empty() {
                    entries.push(DbEntry {
                        object: o.clone(),
                        points,
                        source: f.id,
                    });
                }
            }
        }
        GtDatabase { entries }
    }
}

/// Injects up to `n` database objects from other frames whose boxes do not
/// overlap any existing box in BEV. Scene points inside an injected box are removed.
pub fn gt_sample(frame: &mut Frame, db: &GtDatabase, n: usize, rng: &mut ChaCha8Rng) {
    let pool: Vec<&DbEntry> = db.entries.iter().filter(|e| e.source != frame.id).collect();
    for _ in 0..n {
        let Some(e) = pool.choose(rng) else {
            return;
        };
        let b = e.object.bbox;
        if frame.objects.iter().any(|o| bev_iou(&o.bbox, &b) > 0.0) {
            continue;
        }
        frame.points.retain(|p| !b.contains_point([p[0], p[1], p[2]]));
        frame.points.extend_from_slice(&e.points);
        frame.objects.push(e.object.clone());
    }
}

fn map_boxes(frame: &mut Frame, f: impl Fn(&Box3D) -> Box3D) {
    for o in &mut frame.objects {
        o.bbox = f(&o.bbox);
    }
}

/// Mirror across the X axis: `y → -y`, `θ → -θ`.
pub fn flip(frame: &mut Frame) {
    for p in &mut frame.points {
        p[1] = -p[1];
    }
    map_boxes(frame, |b| {
        Box3D::new(b.x, -b.y, b.z, b.l, b.w, b.h, normalize_angle(-b.theta))
    });
}

/// Rotation by `phi` about Z.
pub fn rotate(frame: &mut Frame, phi: f64) {
    let (s, c) = phi.sin_cos();
    for p in &mut frame.points {
        let (x, y) = (p[0], p[1]);
        p[0] = c * x - s * y;
        p[1] = s * x + c * y;
    }
    map_boxes(frame, |b| {
        Box3D::new(
            c * b.x - s * b.y,
            s * b.x + c * b.y,
            b.z,
            b.l,
            b.w,
            b.h,
            normalize_angle(b.theta + phi),
        )
    });
}

/// Uniform scaling about the origin.
pub fn scale(frame: &mut Frame, s: f64) {
    for p in &mut frame.points {
        for v in &mut p[..3] {
            *v *= s;
        }
    }
    map_boxes(frame, |b| {
        Box3D::new(b.x * s, b.y * s, b.z * s, b.l * s, b.w * s, b.h * s, b.theta)
    });
}

pub fn augment(frame: &Frame, db: Option<&GtDatabase>, cfg: &AugmentCfg, rng: &mut ChaCha8Rng) -> Frame {
    let mut out = frame.clone();
    if let Some(db) = db {
        gt_sample(&mut out, db, cfg.gt_samples, rng);
    }
    if rng.random_bool(cfg.flip_probability.clamp(0.0, 1.0)) {
        flip(&mut out);
    }
    let phi = if cfg.rotation > 0.0 {
        rng.random_range(-cfg.rotation..=cfg.rotation)
    } else {
        0.0
    };
    rotate(&mut out, phi);
    let s = if cfg.scale.1 > cfg.scale.0 {
        rng.random_range(cfg.scale.0..=cfg.scale.1)
    } else {
        cfg.scale.0
    };
    scale(&mut out, s);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Calib;
    use rand::SeedableRng;

    fn frame() -> Frame {
        Frame {
            id: 1,
            points: vec![[10.0, 1.0, -1.0, 0.3], [10.5, 0.5, -0.5, 0.4], [3.0, -4.0, -1.7, 0.1]],
            objects: vec![Object {
                class_id: 0,
                bbox: Box3D::new(10.2, 0.8, -0.9, 3.9, 1.6, 1.56, 0.3),
                truncation: 0.0,
                occlusion: 0,
                bbox_height: 0.0,
                ignore: false,
            }],
            calib: Calib::synthetic(),
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut f = frame();
        flip(&mut f);
        flip(&mut f);
        assert_eq!(f, frame());
    }

    #[test]
    fn scale_cubes_volume() {
        let mut f = frame();
        let v = f.objects[0].bbox.volume();
        scale(&mut f, 1.05);
        assert!((f.objects[0].bbox.volume() - v * 1.05f64.powi(3)).abs() < 1e-12);
    }

    #[test]
    fn gt_sampling_skips_own_frame_and_collisions() {
        let f = frame();
        let mut other = frame();
        other.id = 2;
        let db = GtDatabase::from_frames([&other]);
        assert_eq!(db.entries.len(), 1);
        let mut g = f.clone();
        gt_sample(&mut g, &db, 5, &mut ChaCha8Rng::seed_from_u64(0));
        // the only candidate sits on the existing car
        assert_eq!(g.objects.len(), 1);
        let mut moved = other.clone();
        rotate(&mut moved, 1.0);
        let db = GtDatabase::from_frames([&moved]);
        gt_sample(&mut g, &db, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(g.objects.len(), 2);
    }
}
