//! Per-class BEV occupancy-probability maps and their on-disk form.
//!
//! ```text
//! "BSH1" u32:K u32:H u32:W f32:dx f32:dy f32:x0 f32:y0 f32[K·H·W]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::BevGrid;

const MAGIC: &[u8; 4] = b"BSH1";
pub const HEADER_BYTES: usize = 32;

/// `K` channels over a BEV grid, stored as 32-bit floats in `[c][ix][iy]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeHeatmap {
    grid: BevGrid,
    k: usize,
    data: Vec<f32>,
}

impl ShapeHeatmap {
    pub fn zeros(k: usize, grid: &BevGrid) -> Self {
        ShapeHeatmap {
            grid: *grid,
            k,
            data: vec![0.0; k * grid.num_cells()],
        }
    }

    pub fn from_values(k: usize, grid: &BevGrid, data: Vec<f32>) -> Result<Self> {
        if data.len() != k * grid.num_cells() {
            return Err(Error::Shape(format!(
                "heatmap needs {} values, got {}",
                k * grid.num_cells(),
                data.len()
            )));
        }
        Ok(ShapeHeatmap { grid: *grid, k, data })
    }

    pub fn grid(&self) -> &BevGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.k
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    fn index(&self, c: usize, ix: usize, iy: usize) -> usize {
        (c * self.grid.nx() + ix) * self.grid.ny() + iy
    }

    pub fn get(&self, c: usize, ix: usize, iy: usize) -> f32 {
        self.data[self.index(c, ix, iy)]
    }

    pub fn set(&mut self, c: usize, ix: usize, iy: usize, v: f32) {
        let i = self.index(c, ix, iy);
        self.data[i] = v;
    }

    /// Raises a cell to `v` if it is currently lower.
    pub fn raise(&mut self, c: usize, ix: usize, iy: usize, v: f32) {
        let i = self.index(c, ix, iy);
        if v > self.data[i] {
            self.data[i] = v;
        }
    }

    /// Element-wise maximum with another map on the same grid.
    pub fn max_assign(&mut self, other: &ShapeHeatmap) -> Result<()> {
        if other.grid != self.grid || other.k != self.k {
            return Err(Error::Shape("heatmaps differ in grid or channel count".into()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b > *a {
                *a = b;
            }
        }
        Ok(())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        for d in [self.k, self.grid.nx(), self.grid.ny()] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let (dx, dy, _) = self.grid.cell_size();
        for v in [dx, dy, self.grid.x_range().0, self.grid.y_range().0] {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
        for v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Parses a heatmap whose header must agree with `grid` (compared at 32-bit precision).
    pub fn read_from<R: Read>(mut input: R, grid: &BevGrid, path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: bytes.len() as u64,
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("not a heatmap file".into()));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let f = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (k, h, w) = (u(4), u(8), u(12));
        let (dx, dy, _) = grid.cell_size();
        let expect = [dx as f32, dy as f32, grid.x_range().0 as f32, grid.y_range().0 as f32];
        let got = [f(16), f(20), f(24), f(28)];
        if h != grid.nx() || w != grid.ny() || expect != got {
            return Err(bad(format!(
                "heatmap grid {h}x{w} cell ({}, {}) origin ({}, {}) does not match the configured grid",
                got[0], got[1], got[2], got[3]
            )));
        }
        let n = k * h * w;
        let need = HEADER_BYTES + 4 * n;
        if bytes.len() < need {
            let whole = (bytes.len() - HEADER_BYTES) / 4 * 4 + HEADER_BYTES;
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                offset: whole as u64,
            });
        }
        if bytes.len() > need {
            return Err(bad(format!("{} trailing bytes", bytes.len() - need)));
        }
        let data = bytes[HEADER_BYTES..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ShapeHeatmap { grid: *grid, k, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, grid: &BevGrid) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file), grid, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let grid = BevGrid::desk();
        let mut m = ShapeHeatmap::zeros(2, &grid);
        m.set(0, 3, 4, 1.0);
        m.set(1, 63, 0, (-0.5f32).exp());
        m.set(1, 10, 10, f32::MIN_POSITIVE);
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(bytes.len(), HEADER_BYTES + 4 * 2 * 64 * 64);
        let back = ShapeHeatmap::read_from(bytes.as_slice(), &grid, Path::new("mem")).unwrap();
        let a: Vec<u32> = m.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn grid_mismatch_rejected() {
        let m = ShapeHeatmap::zeros(1, &BevGrid::desk());
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        let other = BevGrid::desk().downsampled(2).unwrap();
        assert!(ShapeHeatmap::read_from(bytes.as_slice(), &other, Path::new("mem")).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let m = ShapeHeatmap::zeros(1, &BevGrid::desk());
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 6);
        match ShapeHeatmap::read_from(bytes.as_slice(), &BevGrid::desk(), Path::new("mem")) {
            Err(Error::Truncated { offset, .. }) => assert_eq!(offset as usize % 4, 0),
            other => panic!("unexpected {other:?}"),
        }
    }
}
