//! Metric-to-cell discretization shared by pillarization, labels, anchors and heads.
//!
//! Cell rows run along X and columns along Y, so a `(C, H, W)` BEV tensor is
//! indexed as `[c][ix][iy]` with `H = nx` and `W = ny`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DIVISIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BevGrid {
    x_range: (f64, f64),
    y_range: (f64, f64),
    z_range: (f64, f64),
    cell: (f64, f64, f64),
    nx: usize,
    ny: usize,
}

fn cells_along(lo: f64, hi: f64, step: f64, axis: &str) -> Result<usize> {
    if !(hi > lo) || !(step > 0.0) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Config(format!(
            "{axis} range [{lo}, {hi}) with cell {step} is not a valid interval"
        )));
    }
    let n = (hi - lo) / step;
    let rounded = n.round();
    if rounded < 1.0 || (n - rounded).abs() > DIVISIBILITY_TOL * rounded.max(1.0) {
        return Err(Error::Config(format!(
            "{axis} range [{lo}, {hi}) is not divisible by cell size {step}"
        )));
    }
    Ok(rounded as usize)
}

impl BevGrid {
    pub fn new(x_range: (f64, f64), y_range: (f64, f64), z_range: (f64, f64), cell: (f64, f64, f64)) -> Result<Self> {
        let nx = cells_along(x_range.0, x_range.1, cell.0, "x")?;
        let ny = cells_along(y_range.0, y_range.1, cell.1, "y")?;
        // Pillars may span the full height, so only require a positive z cell.
        if !(z_range.1 > z_range.0) || !(cell.2 > 0.0) {
            return Err(Error::Config(format!(
                "z range [{}, {}) with cell {} is not valid",
                z_range.0, z_range.1, cell.2
            )));
        }
        Ok(BevGrid {
            x_range,
            y_range,
            z_range,
            cell,
            nx,
            ny,
        })
    }

    /// Full-scale pillar configuration: x∈[0,69.12], y∈[−39.68,39.68], z∈[−3,1], 0.16×0.16×4 m.
    pub fn kitti_pillars() -> Self {
        BevGrid::new((0.0, 69.12), (-39.68, 39.68), (-3.0, 1.0), (0.16, 0.16, 4.0)).expect("constant grid is valid")
    }

    /// Voxel constants of the accuracy variant; kept for configuration parity only.
    pub fn kitti_voxels() -> Self {
        BevGrid::new((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0), (0.05, 0.05, 0.1)).expect("constant grid is valid")
    }

    /// Desk-scale grid: 64×64 cells over 20.48 m.
    pub fn desk() -> Self {
        BevGrid::new((0.0, 20.48), (-10.24, 10.24), (-3.0, 1.0), (0.32, 0.32, 4.0)).expect("constant grid is valid")
    }

    pub fn x_range(&self) -> (f64, f64) {
        self.x_range
    }

    pub fn y_range(&self) -> (f64, f64) {
        self.y_range
    }

    pub fn z_range(&self) -> (f64, f64) {
        self.z_range
    }

    pub fn cell_size(&self) -> (f64, f64, f64) {
        self.cell
    }

    /// Number of cells along X (tensor height).
    pub fn nx(&self) -> usize {
        self.nx
    }

    /// Number of cells along Y (tensor width).
    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn num_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn contains(&self, x: f64, y: f64, z: f64) -> bool {
        x >= self.x_range.0
            && x < self.x_range.1
            && y >= self.y_range.0
            && y < self.y_range.1
            && z >= self.z_range.0
            && z < self.z_range.1
    }

    /// Cell of a metric point, ignoring height. `None` outside the BEV footprint.
    pub fn cell_of_xy(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_range.0 && x < self.x_range.1 && y >= self.y_range.0 && y < self.y_range.1) {
            return None;
        }
        let ix = ((x - self.x_range.0) / self.cell.0).floor() as usize;
        let iy = ((y - self.y_range.0) / self.cell.1).floor() as usize;
        Some((ix.min(self.nx - 1), iy.min(self.ny - 1)))
    }

    pub fn cell_of(&self, x: f64, y: f64, z: f64) -> Option<(usize, usize)> {
        if z >= self.z_range.0 && z < self.z_range.1 {
            self.cell_of_xy(x, y)
        } else {
            None
        }
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.x_range.0 + (ix as f64 + 0.5) * self.cell.0,
            self.y_range.0 + (iy as f64 + 0.5) * self.cell.1,
        )
    }

    /// Continuous cell coordinates where cell centers sit on integers.
    pub fn to_cell_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.x_range.0) / self.cell.0 - 0.5,
            (y - self.y_range.0) / self.cell.1 - 0.5,
        )
    }

    pub fn linear_index(&self, ix: usize, iy: usize) -> usize {
        ix * self.ny + iy
    }

    /// Same metric extent with cells `stride` times larger.
    pub fn downsampled(&self, stride: usize) -> Result<Self> {
        if stride == 0 || self.nx % stride != 0 || self.ny % stride != 0 {
            return Err(Error::Config(format!(
                "grid {}x{} is not divisible by stride {stride}",
                self.nx, self.ny
            )));
        }
        let s = stride as f64;
        BevGrid::new(
            self.x_range,
            self.y_range,
            self.z_range,
            (self.cell.0 * s, self.cell.1 * s, self.cell.2),
        )
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_range.0 + self.x_range.1),
            0.5 * (self.y_range.0 + self.y_range.1),
        )
    }
}
