//! Oriented-box algebra: rotated IoU, NMS, anchors and the residual codec.

use std::cmp::Ordering;
use std::f64::consts::{FRAC_PI_2, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BevGrid;

/// Vertices closer than this to a clipping edge count as lying on it.
const CLIP_EPS: f64 = 1e-9;

/// Wraps an angle into (−π, π].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// Oriented 3D box: center, size along the heading (l), lateral (w) and vertical (h) axes, yaw about Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

impl Box3D {
    pub fn new(x: f64, y: f64, z: f64, l: f64, w: f64, h: f64, theta: f64) -> Self {
        Box3D {
            x,
            y,
            z,
            l,
            w,
            h,
            theta: normalize_angle(theta),
        }
    }

    pub fn is_valid(&self) -> bool {
        self.l > 0.0
            && self.w > 0.0
            && self.h > 0.0
            && [self.x, self.y, self.z, self.l, self.w, self.h, self.theta]
                .iter()
                .all(|v| v.is_finite())
    }

    pub fn volume(&self) -> f64 {
        self.l * self.w * self.h
    }

    pub fn bev_area(&self) -> f64 {
        self.l * self.w
    }

    pub fn z_min(&self) -> f64 {
        self.z - 0.5 * self.h
    }

    pub fn z_max(&self) -> f64 {
        self.z + 0.5 * self.h
    }

    /// BEV footprint corners in counter-clockwise order.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (hl, hw) = (0.5 * self.l, 0.5 * self.w);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.x + u * c - v * s, self.y + u * s + v * c])
    }

    /// Maps a world point into the box frame (heading along +x).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.x;
        let dy = p[1] - self.y;
        [dx * c + dy * s, -dx * s + dy * c, p[2] - self.z]
    }

    pub fn to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.theta.sin_cos();
        [
            self.x + p[0] * c - p[1] * s,
            self.y + p[0] * s + p[1] * c,
            self.z + p[2],
        ]
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        self.contains_point_with_margin(p, 0.0)
    }

    /// Point-in-box test with the box enlarged by `margin` (fraction of each dimension).
    pub fn contains_point_with_margin(&self, p: [f64; 3], margin: f64) -> bool {
        let q = self.to_local(p);
        let f = 0.5 * (1.0 + margin);
        q[0].abs() <= f * self.l && q[1].abs() <= f * self.w && q[2].abs() <= f * self.h
    }

    pub fn contains_bev(&self, x: f64, y: f64) -> bool {
        let q = self.to_local([x, y, self.z]);
        q[0].abs() <= 0.5 * self.l && q[1].abs() <= 0.5 * self.w
    }

    /// Radius of the circle circumscribing the BEV footprint.
    pub fn bev_radius(&self) -> f64 {
        0.5 * (self.l * self.l + self.w * self.w).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: Box3D,
    pub score: f64,
    pub class_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IouMetric {
    Bev,
    #[serde(rename = "3d")]
    Iou3d,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        twice += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * twice.abs()
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise `clip` polygon.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= -CLIP_EPS;
            let prev_in = cross(a, b, prev) >= -CLIP_EPS;
            if cur_in {
                if !prev_in {
                    output.push(segment_line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let denom = dp - dq;
    if denom.abs() < f64::MIN_POSITIVE {
        return q;
    }
    let t = dp / denom;
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Intersection area of the two rotated BEV rectangles.
pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    let dx = a.x - b.x;
    let dy = a.y - b.y;
    let reach = a.bev_radius() + b.bev_radius();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let clipped = clip_convex(&a.bev_corners(), &b.bev_corners());
    polygon_area(&clipped)
}

/// Rotated BEV IoU. Degenerate boxes give 0.
pub fn bev_iou(a: &Box3D, b: &Box3D) -> f64 {
    let area_a = a.bev_area();
    let area_b = b.bev_area();
    if !(area_a > 0.0) || !(area_b > 0.0) {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU: BEV intersection times vertical overlap over the union volume.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let vol_a = a.volume();
    let vol_b = b.volume();
    if !(vol_a > 0.0) || !(vol_b > 0.0) {
        return 0.0;
    }
    let overlap_z = a.z_max().min(b.z_max()) - a.z_min().max(b.z_min());
    if overlap_z <= 0.0 {
        return 0.0;
    }
    let inter = bev_intersection_area(a, b) * overlap_z;
    let union = vol_a + vol_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn iou(a: &Box3D, b: &Box3D, metric: IouMetric) -> f64 {
    match metric {
        IouMetric::Bev => bev_iou(a, b),
        IouMetric::Iou3d => iou3d(a, b),
    }
}

/// Indices of `scores` sorted by descending score, ties by ascending index.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| {
        scores[j]
            .partial_cmp(&scores[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Greedy non-maximum suppression; returns the indices of survivors in score order.
pub fn nms_indices(dets: &[ScoredBox], iou_thresh: f64, metric: IouMetric) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = argsort_desc(&scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        let suppressed = keep
            .iter()
            .any(|&k| iou(&dets[k].bbox, &dets[i].bbox, metric) > iou_thresh);
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

pub fn nms(dets: &[ScoredBox], iou_thresh: f64, metric: IouMetric) -> Vec<ScoredBox> {
    nms_indices(dets, iou_thresh, metric)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Residual of `gt` against `anchor`: (Δx, Δy, Δz, Δl, Δw, Δh, Δθ).
pub fn encode_box(gt: &Box3D, anchor: &Box3D) -> Result<[f64; 7]> {
    if !(anchor.l > 0.0 && anchor.w > 0.0 && anchor.h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "anchor size must be positive, got ({}, {}, {})",
            anchor.l, anchor.w, anchor.h
        )));
    }
    if !(gt.l > 0.0 && gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "target size must be positive, got ({}, {}, {})",
            gt.l, gt.w, gt.h
        )));
    }
    let diag = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    Ok([
        (gt.x - anchor.x) / diag,
        (gt.y - anchor.y) / diag,
        (gt.z - anchor.z) / anchor.h,
        (gt.l / anchor.l).ln(),
        (gt.w / anchor.w).ln(),
        (gt.h / anchor.h).ln(),
        (gt.theta - anchor.theta).sin(),
    ])
}

/// Inverse of [`encode_box`]; the yaw is recovered within ±π/2 of the anchor.
pub fn decode_box(delta: &[f64; 7], anchor: &Box3D) -> Box3D {
    let diag = (anchor.l * anchor.l + anchor.w * anchor.w).sqrt();
    Box3D::new(
        anchor.x + delta[0] * diag,
        anchor.y + delta[1] * diag,
        anchor.z + delta[2] * anchor.h,
        anchor.l * delta[3].exp(),
        anchor.w * delta[4].exp(),
        anchor.h * delta[5].exp(),
        anchor.theta + delta[6].clamp(-1.0, 1.0).asin(),
    )
}

/// Anchor size and height for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorClass {
    pub l: f64,
    pub w: f64,
    pub h: f64,
    pub z_center: f64,
}

impl AnchorClass {
    /// De-facto KITTI car anchor.
    pub fn car() -> Self {
        AnchorClass {
            l: 3.9,
            w: 1.6,
            h: 1.56,
            z_center: -1.0,
        }
    }
}

pub const ANCHOR_YAWS: [f64; 2] = [0.0, FRAC_PI_2];

/// Two anchors (0, π/2) per feature-map cell and class.
///
/// Anchor index is `((ix * ny + iy) * classes + class) * 2 + yaw`.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    grid: BevGrid,
    classes: Vec<AnchorClass>,
    boxes: Vec<Box3D>,
}

impl AnchorSet {
    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn classes(&self) -> &[AnchorClass] {
        &self.classes
    }

    pub fn boxes(&self) -> &[Box3D] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn per_cell(&self) -> usize {
        self.classes.len() * ANCHOR_YAWS.len()
    }

    /// `(ix, iy, class, yaw_index)` of an anchor index.
    pub fn locate(&self, index: usize) -> (usize, usize, usize, usize) {
        let yaw = index % 2;
        let rest = index / 2;
        let class = rest % self.classes.len();
        let cell = rest / self.classes.len();
        (cell / self.grid.ny(), cell % self.grid.ny(), class, yaw)
    }

    pub fn class_of(&self, index: usize) -> usize {
        (index / 2) % self.classes.len()
    }
}

/// Places anchors at every cell center of the feature-map grid.
pub fn make_anchors(feature_grid: &BevGrid, classes: &[AnchorClass]) -> AnchorSet {
    let mut boxes = Vec::with_capacity(feature_grid.num_cells() * classes.len() * 2);
    for ix in 0..feature_grid.nx() {
        for iy in 0..feature_grid.ny() {
            let (cx, cy) = feature_grid.cell_center(ix, iy);
            for class in classes {
                for yaw in ANCHOR_YAWS {
                    boxes.push(Box3D::new(cx, cy, class.z_center, class.l, class.w, class.h, yaw));
                }
            }
        }
    }
    AnchorSet {
        grid: *feature_grid,
        classes: classes.to_vec(),
        boxes,
    }
}
