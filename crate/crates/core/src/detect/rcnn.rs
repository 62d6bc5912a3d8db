use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::AssignCfg;
use super::rpn::CODE_SIZE;
use crate::error::{Error, Result};
use crate::geometry::{decode_box, encode_box, iou3d, Box3D};
use crate::grid::BevGrid;
use crate::nn::{Forward, Linear};
use crate::tensor::{BilinearPoint, Graph, ParamStore, Tensor, Var};

pub const GRID_SIZE: usize = 6;
pub const GRID_POINTS: usize = GRID_SIZE * GRID_SIZE * GRID_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcnnCfg {
    /// Per-lattice-point feature width after the shared point layer.
    pub point_channels: usize,
    pub hidden: usize,
}

impl Default for RcnnCfg {
    fn default() -> Self {
        RcnnCfg {
            point_channels: 8,
            hidden: 64,
        }
    }
}

/// Lattice points of a proposal in world coordinates, corner-aligned, ordered `[i][j][k]`
/// along the box's length, width and height.
pub fn roi_grid_points(proposal: &Box3D) -> Vec<[f64; 3]> {
    let step = |extent: f64, i: usize| extent * (i as f64 / (GRID_SIZE - 1) as f64 - 0.5);
    let mut pts = Vec::with_capacity(GRID_POINTS);
    for i in 0..GRID_SIZE {
        for j in 0..GRID_SIZE {
            for k in 0..GRID_SIZE {
                pts.push(proposal.to_world([step(proposal.l, i), step(proposal.w, j), step(proposal.h, k)]));
            }
        }
    }
    pts
}

/// Relative height of lattice layer `k` in `[-0.5, 0.5]`.
fn lattice_height(k: usize) -> f64 {
    k as f64 / (GRID_SIZE - 1) as f64 - 0.5
}

/// A feature map and the grid its cells live on.
#[derive(Debug, Clone, Copy)]
pub struct PooledMap<'a> {
    pub map: Var,
    pub grid: &'a BevGrid,
}

/// Bilinear samples of every map at every lattice point of every RoI, plus the
/// point's relative height: `[R·216, ΣC + 1]`.
pub fn roi_grid_pool(g: &mut Graph, rois: &[(usize, Box3D)], maps: &[PooledMap<'_>]) -> Result<Var> {
    let mut parts = Vec::with_capacity(maps.len() + 1);
    let lattices: Vec<Vec<[f64; 3]>> = rois.iter().map(|r| roi_grid_points(&r.1)).collect();
    for m in maps {
        let mut points = Vec::with_capacity(rois.len() * GRID_POINTS);
        for ((batch, _), lattice) in rois.iter().zip(&lattices) {
            for p in lattice {
                let (u, v) = m.grid.to_cell_coords(p[0], p[1]);
                points.push(BilinearPoint { batch: *batch, u, v });
            }
        }
        parts.push(g.bilinear_sample(m.map, &points)?);
    }
    let heights: Vec<f64> = (0..rois.len())
        .flat_map(|_| (0..GRID_POINTS).map(|p| lattice_height(p % GRID_SIZE)))
        .collect();
    parts.push(g.constant(Tensor::from_vec(&[rois.len() * GRID_POINTS, 1], heights)?));
    g.concat(&parts)
}

/// Shared point layer, flatten, shared hidden layer, then confidence and residual heads.
#[derive(Debug, Clone)]
pub struct RcnnHead {
    pub cfg: RcnnCfg,
    point: Linear,
    shared: Linear,
    pub conf: Linear,
    pub reg: Linear,
}

#[derive(Debug, Clone, Copy)]
pub struct RcnnOutput {
    /// `[R, 1]` confidence logits.
    pub conf: Var,
    /// `[R, 7]` refinement residuals against the proposals.
    pub reg: Var,
}

impl RcnnHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &RcnnCfg,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let d = cfg.point_channels;
        let point = Linear::new(store, &format!("{name}.point"), in_channels, d, rng)?;
        let shared = Linear::new(store, &format!("{name}.shared"), GRID_POINTS * d, cfg.hidden, rng)?;
        let conf = Linear::new(store, &format!("{name}.conf"), cfg.hidden, 1, rng)?;
        let reg = Linear::new(store, &format!("{name}.reg"), cfg.hidden, CODE_SIZE, rng)?;
        store.value_mut(reg.w).iter_mut().for_each(|w| *w *= 0.01);
        Ok(RcnnHead {
            cfg: *cfg,
            point,
            shared,
            conf,
            reg,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, pooled: Var) -> Result<RcnnOutput> {
        let rows = g.shape(pooled)[0];
        if rows % GRID_POINTS != 0 {
            return Err(Error::Shape(format!(
                "{rows} pooled rows is not a whole number of RoIs"
            )));
        }
        let r = rows / GRID_POINTS;
        let h = self.point.forward(g, f, pooled)?;
        let h = g.relu(h);
        let h = g.reshape(h, &[r, GRID_POINTS * self.cfg.point_channels])?;
        let h = self.shared.forward(g, f, h)?;
        let h = g.relu(h);
        Ok(RcnnOutput {
            conf: self.conf.forward(g, f, h)?,
            reg: self.reg.forward(g, f, h)?,
        })
    }
}

/// IoU-guided confidence target `clamp(2·IoU − 0.5, 0, 1)`.
pub fn confidence_target(iou: f64) -> f64 {
    (2.0 * iou - 0.5).clamp(0.0, 1.0)
}

/// A proposal chosen for refinement training with its best-matching box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiSample {
    pub proposal: Box3D,
    pub iou: f64,
    pub gt: Option<Box3D>,
}

/// Up to `roi_samples` proposals with at most `roi_fg_fraction` foreground
/// (`IoU > roi_fg_iou`), taken in proposal order.
pub fn sample_rois(proposals: &[Box3D], gts: &[Box3D], cfg: &AssignCfg) -> Vec<RoiSample> {
    let all: Vec<RoiSample> = proposals
        .iter()
        .map(|p| {
            let mut best = (0.0, None);
            for g in gts {
                let iou = iou3d(p, g);
                if iou > best.0 {
                    best = (iou, Some(*g));
                }
            }
            RoiSample {
                proposal: *p,
                iou: best.0,
                gt: best.1,
            }
        })
        .collect();
    let fg_cap = (cfg.roi_samples as f64 * cfg.roi_fg_fraction).round() as usize;
    let fg: Vec<RoiSample> = all
        .iter()
        .filter(|s| s.iou > cfg.roi_fg_iou)
        .take(fg_cap)
        .copied()
        .collect();
    let bg_cap = cfg.roi_samples - fg.len();
    let bg = all.iter().filter(|s| s.iou <= cfg.roi_fg_iou).take(bg_cap).copied();
    fg.into_iter().chain(bg).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct RcnnLoss {
    pub iou: Var,
    pub reg: Var,
    pub total: Var,
}

/// BCE on confidence targets over all samples plus smooth-L1 on the residuals of
/// foreground samples, averaged over them.
pub fn rcnn_loss(g: &mut Graph, out: &RcnnOutput, samples: &[RoiSample], fg_iou: f64, delta: f64) -> Result<RcnnLoss> {
    let targets: Vec<f64> = samples.iter().map(|s| confidence_target(s.iou)).collect();
    let iou = g.bce_with_logits(out.conf, &targets)?;
    let mut res = vec![0.0; samples.len() * CODE_SIZE];
    let mut wts = vec![0.0; samples.len() * CODE_SIZE];
    let mut fg = 0usize;
    for (i, s) in samples.iter().enumerate() {
        if s.iou <= fg_iou {
            continue;
        }
        let Some(gt) = s.gt else { continue };
        let code = encode_box(&gt, &s.proposal)?;
        res[i * CODE_SIZE..(i + 1) * CODE_SIZE].copy_from_slice(&code);
        wts[i * CODE_SIZE..(i + 1) * CODE_SIZE].fill(1.0);
        fg += 1;
    }
    let reg = g.smooth_l1_loss(out.reg, &res, &wts, delta, fg as f64)?;
    let total = g.weighted_sum(&[(iou, 1.0), (reg, 1.0)])?;
    Ok(RcnnLoss { iou, reg, total })
}

/// Applies refinement residuals to proposals.
pub fn refine_boxes(proposals: &[Box3D], residuals: &[f64]) -> Vec<Box3D> {
    proposals
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut code = [0.0; CODE_SIZE];
            code.copy_from_slice(&residuals[i * CODE_SIZE..(i + 1) * CODE_SIZE]);
            decode_box(&code, p)
        })
        .collect()
}
