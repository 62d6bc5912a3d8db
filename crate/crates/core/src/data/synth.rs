//! Synthetic LiDAR scenes: boxes on a flat ground, scanned by a spinning sensor
//! at the origin with first-hit returns, so near obstacles shadow what lies
//! behind them and far objects get fewer points.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{occlusion_level, velodyne, Calib, Frame, Object};
use crate::error::{Error, Result};
use crate::geometry::{bev_intersection_area, Box3D};
use crate::grid::BevGrid;
use crate::labels::BankEntry;
use crate::pillars::Point;

const STREAM_BASE: u64 = 1 << 32;
const PLACEMENT_TRIES: usize = 200;
/// Extra clearance between placed boxes.
const GAP: f64 = 0.4;
const MIN_RANGE: f64 = 3.0;
const MIN_BANK_POINTS: usize = 32;
const MAX_BANK_POINTS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSceneCfg {
    pub seed: u64,
    /// Inclusive range of cars per scene.
    pub cars: (usize, usize),
    /// `(mean, std)` of car length, width and height.
    pub car_length: (f64, f64),
    pub car_width: (f64, f64),
    pub car_height: (f64, f64),
    /// Chance that a car gets an obstacle on its line of sight.
    pub occluder_probability: f64,
    pub azimuth_step_deg: f64,
    /// Total horizontal field of view, centered on +x.
    pub azimuth_fov_deg: f64,
    pub rings: usize,
    pub elevation_deg: (f64, f64),
    pub max_range: f64,
    pub ground_z: f64,
    pub range_noise: f64,
}

impl SynthSceneCfg {
    pub fn desk(seed: u64) -> Self {
        SynthSceneCfg {
            seed,
            cars: (3, 6),
            car_length: (3.9, 0.1),
            car_width: (1.6, 0.05),
            car_height: (1.56, 0.05),
            occluder_probability: 0.7,
            azimuth_step_deg: 0.2,
            azimuth_fov_deg: 180.0,
            rings: 26,
            elevation_deg: (-24.8, 2.0),
            max_range: 40.0,
            ground_z: -1.73,
            range_noise: 0.01,
        }
    }

    pub fn kitti(seed: u64) -> Self {
        SynthSceneCfg {
            cars: (8, 16),
            max_range: 80.0,
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cars.0 <= self.cars.1
            && self.azimuth_step_deg > 0.0
            && self.azimuth_fov_deg > 0.0
            && self.azimuth_fov_deg <= 360.0
            && self.rings >= 2
            && self.elevation_deg.0 < self.elevation_deg.1
            && self.max_range > 0.0
            && self.range_noise >= 0.0
            && (0.0..=1.0).contains(&self.occluder_probability)
            && self.car_length.0 > 0.0
            && self.car_width.0 > 0.0
            && self.car_height.0 > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("synthetic scene parameters out of range".into()))
        }
    }

    pub fn ray_directions(&self) -> Vec<[f64; 3]> {
        let n_az = (self.azimuth_fov_deg / self.azimuth_step_deg).round() as usize;
        let (e0, e1) = self.elevation_deg;
        let mut dirs = Vec::with_capacity(n_az * self.rings);
        for r in 0..self.rings {
            let el = (e0 + (e1 - e0) * r as f64 / (self.rings - 1) as f64).to_radians();
            for a in 0..n_az {
                let az = (-0.5 * self.azimuth_fov_deg + (a as f64 + 0.5) * self.azimuth_step_deg).to_radians();
                dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        dirs
    }
}

/// A box the rays can hit, with the reflectance of its surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Obstacle {
    pub bbox: Box3D,
    pub reflectance: f64,
}

/// Entry distance of a ray from the origin into a box, if any.
pub fn ray_box(dir: [f64; 3], b: &Box3D) -> Option<f64> {
    let (s, c) = b.theta.sin_cos();
    // origin and direction in the box frame
    let o = [-(b.x * c + b.y * s), b.x * s - b.y * c, -b.z];
    let d = [dir[0] * c + dir[1] * s, -dir[0] * s + dir[1] * c, dir[2]];
    let half = [b.l / 2.0, b.w / 2.0, b.h / 2.0];
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k].abs() > half[k] {
                return None;
            }
            continue;
        }
        let a = (-half[k] - o[k]) / d[k];
        let bb = (half[k] - o[k]) / d[k];
        t0 = t0.max(a.min(bb));
        t1 = t1.min(a.max(bb));
        if t0 > t1 {
            return None;
        }
    }
    (t0 > 0.0).then_some(t0)
}

/// Result of scanning a set of obstacles.
#[derive(Debug, Clone)]
pub struct Scan {
    pub points: Vec<Point>,
    /// Returns that came from each obstacle.
    pub hits: Vec<usize>,
    /// Rays that would have hit each obstacle with nothing else in the scene but the ground.
    pub unobstructed: Vec<usize>,
}

/// First-hit scan. Every ray draws its noise and ground reflectance, hit or not,
/// so removing an obstacle leaves all other returns unchanged.
pub fn cast_scene(obstacles: &[Obstacle], cfg: &SynthSceneCfg, rng: &mut ChaCha8Rng) -> Scan {
    let noise = Normal::new(0.0, cfg.range_noise.max(1e-300)).expect("finite std");
    let mut points = Vec::new();
    let mut hits = vec![0; obstacles.len()];
    let mut unobstructed = vec![0; obstacles.len()];
    for dir in cfg.ray_directions() {
        let dn = if cfg.range_noise > 0.0 { noise.sample(rng) } else { 0.0 };
        let ground_refl = rng.random_range(0.05..0.2);
        let mut t_first = if dir[2] < 0.0 {
            cfg.ground_z / dir[2]
        } else {
            f64::INFINITY
        };
        let t_ground = t_first;
        let mut first: Option<usize> = None;
        for (i, o) in obstacles.iter().enumerate() {
            if let Some(t) = ray_box(dir, &o.bbox) {
                if t < t_ground && t <= cfg.max_range {
                    unobstructed[i] += 1;
                }
                if t < t_first {
                    t_first = t;
                    first = Some(i);
                }
            }
        }
        if t_first > cfg.max_range {
            continue;
        }
        let refl = match first {
            Some(i) => {
                hits[i] += 1;
                obstacles[i].reflectance
            }
            None => ground_refl,
        };
        let t = t_first + dn;
        points.push([t * dir[0], t * dir[1], t * dir[2], refl.clamp(0.0, 1.0)]);
    }
    velodyne::quantize(&mut points);
    Scan {
        points,
        hits,
        unobstructed,
    }
}

/// Samples the four sides and the roof of a box uniformly, in its own frame.
pub fn sample_surface(size: [f64; 3], n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let [l, w, h] = size;
    let faces = [w * h, w * h, l * h, l * h, l * w];
    let total: f64 = faces.iter().sum();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random_range(0.0..total);
        let mut face = faces.len() - 1;
        for (k, &a) in faces.iter().enumerate() {
            if u < a {
                face = k;
                break;
            }
            u -= a;
        }
        let (a, b) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        out.push(match face {
            0 => [0.5 * l, a * w, b * h],
            1 => [-0.5 * l, a * w, b * h],
            2 => [a * l, 0.5 * w, b * h],
            3 => [a * l, -0.5 * w, b * h],
            _ => [a * l, b * w, 0.5 * h],
        });
    }
    out
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub frame: Frame,
    /// Fraction of each object's unobstructed returns lost to other obstacles.
    pub occlusion: Vec<f64>,
    pub occluders: Vec<Box3D>,
    /// Full-surface samplings of every visible object.
    pub bank: Vec<BankEntry>,
}

fn fits(b: &Box3D, grid: &BevGrid, placed: &[Box3D]) -> bool {
    let (x0, x1) = grid.x_range();
    let (y0, y1) = grid.y_range();
    let inside = b
        .bev_corners()
        .iter()
        .all(|c| c[0] > x0 && c[0] < x1 && c[1] > y0 && c[1] < y1);
    let padded = Box3D::new(b.x, b.y, b.z, b.l + GAP, b.w + GAP, b.h, b.theta);
    inside && b.x.hypot(b.y) > MIN_RANGE && placed.iter().all(|p| bev_intersection_area(&padded, p) == 0.0)
}

fn sample_normal(rng: &mut ChaCha8Rng, (mean, std): (f64, f64)) -> f64 {
    if std > 0.0 {
        Normal::new(mean, std).expect("finite std").sample(rng).max(0.2 * mean)
    } else {
        mean
    }
}

/// One scene. Cars are placed first and occluders second, so turning occluders
/// off (`occluder_probability = 0`) keeps the cars where they were.
pub fn synth_scene(cfg: &SynthSceneCfg, grid: &BevGrid, id: u64) -> Result<SynthScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(STREAM_BASE + id);
    let mut placed: Vec<Box3D> = Vec::new();
    let mut cars: Vec<Obstacle> = Vec::new();
    let n_cars = rng.random_range(cfg.cars.0..=cfg.cars.1);
    let (x0, x1) = grid.x_range();
    let (y0, y1) = grid.y_range();
    for _ in 0..n_cars {
        let l = sample_normal(&mut rng, cfg.car_length);
        let w = sample_normal(&mut rng, cfg.car_width);
        let h = sample_normal(&mut rng, cfg.car_height);
        let refl = rng.random_range(0.1..0.6);
        for _ in 0..PLACEMENT_TRIES {
            let b = Box3D::new(
                rng.random_range(x0..x1),
                rng.random_range(y0..y1),
                cfg.ground_z + h / 2.0,
                l,
                w,
                h,
                rng.random_range(-PI..PI),
            );
            if fits(&b, grid, &placed) {
                placed.push(b);
                cars.push(Obstacle {
                    bbox: b,
                    reflectance: refl,
                });
                break;
            }
        }
    }
    // occluders come from their own stream so their count never shifts the scan noise
    let mut occ_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    occ_rng.set_stream(2 * STREAM_BASE + id);
    let mut occluders: Vec<Obstacle> = Vec::new();
    for car in cars.clone() {
        if !occ_rng.random_bool(cfg.occluder_probability) {
            continue;
        }
        let r = car.bbox.x.hypot(car.bbox.y);
        let (dx, dy) = (car.bbox.x / r, car.bbox.y / r);
        let l = occ_rng.random_range(1.0..3.0);
        let w = occ_rng.random_range(0.3..0.6);
        let h = occ_rng.random_range(1.0..2.2);
        let refl = occ_rng.random_range(0.3..0.9);
        for _ in 0..20 {
            let u = occ_rng.random_range(0.35..0.75);
            let lateral = occ_rng.random_range(-1.0..1.0);
            let b = Box3D::new(
                dx * r * u - dy * lateral,
                dy * r * u + dx * lateral,
                cfg.ground_z + h / 2.0,
                l,
                w,
                h,
                dy.atan2(dx) + PI / 2.0,
            );
            if fits(&b, grid, &placed) {
                placed.push(b);
                occluders.push(Obstacle {
                    bbox: b,
                    reflectance: refl,
                });
                break;
            }
        }
    }
    let mut obstacles = cars.clone();
    obstacles.extend_from_slice(&occluders);
    let scan = cast_scene(&obstacles, cfg, &mut rng);
    let occlusion: Vec<f64> = (0..cars.len())
        .map(|i| {
            if scan.unobstructed[i] == 0 {
                1.0
            } else {
                1.0 - scan.hits[i] as f64 / scan.unobstructed[i] as f64
            }
        })
        .collect();
    let mut bank_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    bank_rng.set_stream(3 * STREAM_BASE + id);
    let mut bank = Vec::new();
    for (i, car) in cars.iter().enumerate() {
        if scan.unobstructed[i] == 0 {
            continue;
        }
        let size = [car.bbox.l, car.bbox.w, car.bbox.h];
        let n = (2 * scan.unobstructed[i]).clamp(MIN_BANK_POINTS, MAX_BANK_POINTS);
        bank.push(BankEntry {
            class_id: 0,
            size,
            points: sample_surface(size, n, &mut bank_rng),
            source: id,
        });
    }
    let objects = cars
        .iter()
        .zip(&occlusion)
        .map(|(c, &f)| Object {
            class_id: 0,
            bbox: c.bbox,
            truncation: 0.0,
            occlusion: occlusion_level(f),
            bbox_height: 0.0,
            ignore: false,
        })
        .collect();
    Ok(SynthScene {
        frame: Frame {
            id,
            points: scan.points,
            objects,
            calib: Calib::synthetic(),
        },
        occlusion,
        occluders: occluders.iter().map(|o| o.bbox).collect(),
        bank,
    })
}
