//! Ground-truth BEV shape heatmaps: retrieval, assembly, height compression and
//! size-adaptive Gaussian rendering.

mod bank;
mod heatmap;

pub use bank::{
    assemble_shape, mirror_point, retrieval_cost, retrieve_similar, BankEntry, Retrieval, ShapeBank, CLIP_MARGIN,
    COUNT_WEIGHT, DEFAULT_TOP_K, SIZE_WEIGHT,
};
pub use heatmap::{ShapeHeatmap, HEADER_BYTES};

use crate::geometry::Box3D;
use crate::grid::BevGrid;

pub const GAUSSIAN_MIN_OVERLAP: f64 = 0.7;

/// Splats are truncated beyond this many standard deviations.
pub const SPLAT_TRUNCATION: f64 = 3.0;

/// Binary occupancy of the cells hit by `points` in channel `class_id`; height is ignored.
pub fn compress_to_bev(points: &[[f64; 3]], grid: &BevGrid, class_id: usize, k: usize) -> ShapeHeatmap {
    let mut m = ShapeHeatmap::zeros(k, grid);
    for p in points {
        if let Some((ix, iy)) = grid.cell_of_xy(p[0], p[1]) {
            m.set(class_id, ix, iy, 1.0);
        }
    }
    m
}

/// Largest center offset (in the footprint's own units) that keeps IoU above `min_overlap`,
/// minimized over the three corner-displacement cases.
pub fn gaussian_radius(length: f64, width: f64, min_overlap: f64) -> f64 {
    let (h, w, o) = (length, width, min_overlap);
    let root = |a: f64, b: f64, c: f64| (b + (b * b - 4.0 * a * c).max(0.0).sqrt()) / (2.0 * a);
    let r1 = root(1.0, h + w, w * h * (1.0 - o) / (1.0 + o));
    let r2 = root(4.0, 2.0 * (h + w), (1.0 - o) * w * h);
    let r3 = root(4.0 * o, -2.0 * o * (h + w), (o - 1.0) * w * h);
    r1.min(r2).min(r3)
}

/// Standard deviation in cells for an object's splats: a third of the radius, at least one cell.
pub fn sigma_for_box(bbox: &Box3D, grid: &BevGrid) -> f64 {
    let (dx, dy, _) = grid.cell_size();
    (gaussian_radius(bbox.l / dx, bbox.w / dy, GAUSSIAN_MIN_OVERLAP) / 3.0).max(1.0)
}

/// Max-combines `exp(−d²/2σ²)` around one cell of channel `c`, `d` in cell units.
pub fn splat(map: &mut ShapeHeatmap, c: usize, ix: usize, iy: usize, sigma: f64) {
    let reach = SPLAT_TRUNCATION * sigma;
    let r = reach.floor() as i64;
    let (nx, ny) = (map.grid().nx() as i64, map.grid().ny() as i64);
    for dx in -r..=r {
        for dy in -r..=r {
            let (x, y) = (ix as i64 + dx, iy as i64 + dy);
            if x < 0 || y < 0 || x >= nx || y >= ny {
                continue;
            }
            let d2 = (dx * dx + dy * dy) as f64;
            if d2 > reach * reach {
                continue;
            }
            let v = (-d2 / (2.0 * sigma * sigma)).exp();
            map.raise(c, x as usize, y as usize, v.min(1.0) as f32);
        }
    }
}

/// Spreads every occupied cell with the σ of the box that owns it.
///
/// A cell belongs to the same-class box whose footprint contains its center, or
/// failing that to the nearest same-class box center; cells with no box use σ = 1.
pub fn gaussian_render(occupancy: &ShapeHeatmap, boxes: &[(usize, Box3D)]) -> ShapeHeatmap {
    let grid = *occupancy.grid();
    let mut out = ShapeHeatmap::zeros(occupancy.channels(), &grid);
    for c in 0..occupancy.channels() {
        let owners: Vec<&Box3D> = boxes.iter().filter(|b| b.0 == c).map(|b| &b.1).collect();
        let sigmas: Vec<f64> = owners.iter().map(|b| sigma_for_box(b, &grid)).collect();
        for ix in 0..grid.nx() {
            for iy in 0..grid.ny() {
                if occupancy.get(c, ix, iy) <= 0.0 {
                    continue;
                }
                let (x, y) = grid.cell_center(ix, iy);
                let owner = owners.iter().position(|b| b.contains_bev(x, y)).or_else(|| {
                    (0..owners.len()).min_by(|&a, &b| {
                        let da = (owners[a].x - x).hypot(owners[a].y - y);
                        let db = (owners[b].x - x).hypot(owners[b].y - y);
                        da.total_cmp(&db)
                    })
                });
                let sigma = owner.map_or(1.0, |i| sigmas[i]);
                splat(&mut out, c, ix, iy, sigma);
            }
        }
    }
    out
}

/// Options of the label pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelOptions {
    pub k: usize,
    pub top_k: usize,
    /// Render Gaussians; otherwise the binary occupancy is the label.
    pub gaussian: bool,
}

impl Default for LabelOptions {
    fn default() -> Self {
        LabelOptions {
            k: 1,
            top_k: DEFAULT_TOP_K,
            gaussian: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelReport {
    /// Objects whose retrieval returned fewer than `top_k` donors.
    pub short_retrievals: usize,
    /// Objects without points, labeled from their footprint.
    pub empty_objects: usize,
}

/// Builds the shape label of one frame: per object, retrieve donors, assemble,
/// compress and render, then max-merge objects of the same class.
pub fn make_shape_label(
    points: &[[f64; 3]],
    objects: &[(usize, Box3D)],
    bank: &ShapeBank,
    grid: &BevGrid,
    frame_id: Option<u64>,
    opts: &LabelOptions,
) -> (ShapeHeatmap, LabelReport) {
    let mut label = ShapeHeatmap::zeros(opts.k, grid);
    let mut report = LabelReport::default();
    for &(class_id, bbox) in objects {
        if class_id >= opts.k {
            continue;
        }
        let inside: Vec<[f64; 3]> = points.iter().copied().filter(|&p| bbox.contains_point(p)).collect();
        let occupancy = if inside.is_empty() {
            report.empty_objects += 1;
            footprint_occupancy(&bbox, grid, class_id, opts.k)
        } else {
            let r = retrieve_similar(&bbox, inside.len(), class_id, bank, opts.top_k, frame_id);
            if r.short {
                report.short_retrievals += 1;
            }
            let donors: Vec<&BankEntry> = r.indices.iter().map(|&i| &bank.entries()[i]).collect();
            let shape = assemble_shape(&bbox, &inside, &donors);
            compress_to_bev(&shape, grid, class_id, opts.k)
        };
        let rendered = if opts.gaussian {
            gaussian_render(&occupancy, &[(class_id, bbox)])
        } else {
            occupancy
        };
        label.max_assign(&rendered).expect("same grid and channels");
    }
    (label, report)
}

/// Cells whose centers lie inside the box footprint.
pub fn footprint_occupancy(bbox: &Box3D, grid: &BevGrid, class_id: usize, k: usize) -> ShapeHeatmap {
    let mut m = ShapeHeatmap::zeros(k, grid);
    let r = bbox.bev_radius();
    let lo = grid.cell_of_xy(bbox.x - r, bbox.y - r);
    let hi = grid.cell_of_xy(bbox.x + r, bbox.y + r);
    let (x0, y0) = lo.unwrap_or((0, 0));
    let (x1, y1) = hi.unwrap_or((grid.nx() - 1, grid.ny() - 1));
    for ix in x0..=x1 {
        for iy in y0..=y1 {
            let (x, y) = grid.cell_center(ix, iy);
            if bbox.contains_bev(x, y) {
                m.set(class_id, ix, iy, 1.0);
            }
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_peak_and_one_sigma() {
        let grid = BevGrid::desk();
        let mut occ = ShapeHeatmap::zeros(1, &grid);
        occ.set(0, 20, 20, 1.0);
        let mut out = ShapeHeatmap::zeros(1, &grid);
        splat(&mut out, 0, 20, 20, 2.0);
        assert_eq!(out.get(0, 20, 20), 1.0);
        assert_eq!(out.get(0, 22, 20), (-0.5f64).exp() as f32);
        // beyond 3σ nothing is written
        assert_eq!(out.get(0, 27, 20), 0.0);
    }

    #[test]
    fn neighbors_combine_by_max() {
        let grid = BevGrid::desk();
        let mut out = ShapeHeatmap::zeros(1, &grid);
        splat(&mut out, 0, 10, 10, 1.0);
        splat(&mut out, 0, 10, 11, 1.0);
        assert_eq!(out.get(0, 10, 10), 1.0);
        assert_eq!(out.get(0, 10, 11), 1.0);
        // one below both: distances 1 and √2
        assert_eq!(out.get(0, 11, 10), (-0.5f64).exp() as f32);
    }

    #[test]
    fn compress_collapses_height() {
        let grid = BevGrid::desk();
        let m = compress_to_bev(&[[1.0, 1.0, -1.0], [1.0, 1.0, 0.5]], &grid, 0, 1);
        assert_eq!(m.count_nonzero(), 1);
        assert_eq!(compress_to_bev(&[], &grid, 0, 1).count_nonzero(), 0);
    }

    #[test]
    fn desk_car_sigma_is_one_cell() {
        let b = Box3D::new(10.0, 0.0, -1.0, 3.9, 1.6, 1.56, 0.0);
        assert_eq!(sigma_for_box(&b, &BevGrid::desk()), 1.0);
        // much larger objects get wider splats
        let big = Box3D::new(10.0, 0.0, -1.0, 16.0, 10.0, 3.0, 0.0);
        assert!(sigma_for_box(&big, &BevGrid::desk()) > 1.0);
    }

    #[test]
    fn radius_keeps_overlap_at_threshold() {
        // Shifting a box by the radius in the limiting case keeps IoU ≥ the overlap.
        let (l, w) = (12.0, 5.0);
        let r = gaussian_radius(l, w, 0.7);
        let a = Box3D::new(0.0, 0.0, 0.0, l, w, 1.0, 0.0);
        let b = Box3D::new(r / 2f64.sqrt(), r / 2f64.sqrt(), 0.0, l, w, 1.0, 0.0);
        assert!(crate::geometry::bev_iou(&a, &b) >= 0.7 - 1e-9);
    }

    #[test]
    fn empty_scene_gives_zero_label() {
        let grid = BevGrid::desk();
        let (m, rep) = make_shape_label(&[], &[], &ShapeBank::new(), &grid, None, &LabelOptions::default());
        assert_eq!(m.count_nonzero(), 0);
        assert_eq!(rep, LabelReport::default());
    }
}
