//! Pillar partition of point clouds and the one-layer point encoder producing
//! the BEV pseudo-image.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::BevGrid;
use crate::nn::{Forward, Linear};
use crate::tensor::{Graph, ParamStore, PillarSpan, Tensor, Var};

/// `(x, y, z, reflectance)`.
pub type Point = [f64; 4];

pub const DEFAULT_MAX_POINTS: usize = 32;

/// Width of the per-point augmented feature.
pub const AUGMENTED_DIM: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub ix: usize,
    pub iy: usize,
    pub points: Vec<Point>,
}

/// Non-empty pillars of one cloud in row-major cell order.
#[derive(Debug, Clone)]
pub struct PillarBatch {
    pub grid: BevGrid,
    pub pillars: Vec<Pillar>,
}

impl PillarBatch {
    pub fn len(&self) -> usize {
        self.pillars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pillars.is_empty()
    }

    pub fn num_points(&self) -> usize {
        self.pillars.iter().map(|p| p.points.len()).sum()
    }
}

/// Groups points by BEV cell. Out-of-range points are dropped; each pillar keeps
/// its first `max_points` points in input order.
pub fn pillarize(points: &[Point], grid: &BevGrid, max_points: usize) -> PillarBatch {
    let mut slot: Vec<u32> = vec![u32::MAX; grid.num_cells()];
    let mut pillars: Vec<Pillar> = Vec::new();
    for p in points {
        let Some((ix, iy)) = grid.cell_of(p[0], p[1], p[2]) else {
            continue;
        };
        let cell = grid.linear_index(ix, iy);
        let k = if slot[cell] == u32::MAX {
            slot[cell] = pillars.len() as u32;
            pillars.push(Pillar {
                ix,
                iy,
                points: Vec::new(),
            });
            pillars.len() - 1
        } else {
            slot[cell] as usize
        };
        if pillars[k].points.len() < max_points {
            pillars[k].points.push(*p);
        }
    }
    pillars.sort_by_key(|p| grid.linear_index(p.ix, p.iy));
    PillarBatch {
        grid: *grid,
        pillars,
    }
}

/// Per-point features: raw `(x, y, z, r)`, offset to the pillar's point mean,
/// and the BEV offset to the pillar center.
pub fn augment_pillar(pillar: &Pillar, grid: &BevGrid) -> Vec<[f64; AUGMENTED_DIM]> {
    let n = pillar.points.len().max(1) as f64;
    let mut mean = [0.0; 3];
    for p in &pillar.points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let (cx, cy) = grid.cell_center(pillar.ix, pillar.iy);
    pillar
        .points
        .iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                p[3],
                p[0] - mean[0],
                p[1] - mean[1],
                p[2] - mean[2],
                p[0] - cx,
                p[1] - cy,
            ]
        })
        .collect()
}

/// Shared linear + ReLU over augmented points, max-pooled per pillar and scattered
/// to a dense `[N, C, H, W]` map.
#[derive(Debug, Clone)]
pub struct PillarEncoder {
    pub linear: Linear,
    pub channels: usize,
}

impl PillarEncoder {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(PillarEncoder {
            linear: Linear::new(store, &format!("{name}.linear"), AUGMENTED_DIM, channels, rng)?,
            channels,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, batches: &[&PillarBatch]) -> Result<Var> {
        let Some(first) = batches.first() else {
            return Err(Error::InvalidInput("pillar encoder needs at least one cloud".into()));
        };
        let grid = &first.grid;
        if batches.iter().any(|b| b.grid != *grid) {
            return Err(Error::Shape("clouds in one batch use different grids".into()));
        }
        let (h, w) = (grid.nx(), grid.ny());
        let mut rows = Vec::new();
        let mut spans = Vec::new();
        for (bi, batch) in batches.iter().enumerate() {
            for pillar in &batch.pillars {
                let start = rows.len() / AUGMENTED_DIM;
                for feat in augment_pillar(pillar, grid) {
                    rows.extend_from_slice(&feat);
                }
                let end = rows.len() / AUGMENTED_DIM;
                if end > start {
                    spans.push(PillarSpan {
                        batch: bi,
                        ix: pillar.ix,
                        iy: pillar.iy,
                        start,
                        end,
                    });
                }
            }
        }
        let n_rows = rows.len() / AUGMENTED_DIM;
        if n_rows == 0 {
            return Ok(g.constant(Tensor::zeros(&[batches.len(), self.channels, h, w])));
        }
        let x = g.constant(Tensor::from_vec(&[n_rows, AUGMENTED_DIM], rows)?);
        let y = self.linear.forward(g, f, x)?;
        let y = g.relu(y);
        g.pillar_scatter_max(y, &spans, batches.len(), h, w)
    }
}
