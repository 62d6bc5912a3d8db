//! Anchor-based proposals, their losses and decoding, and RoI-grid refinement.

mod assign;
mod rcnn;
mod rpn;

pub use assign::{assign_targets, AssignCfg, Assignment, LABEL_IGNORE, LABEL_NEGATIVE, LABEL_POSITIVE};
pub use rcnn::{
    confidence_target, rcnn_loss, refine_boxes, roi_grid_points, roi_grid_pool, sample_rois, PooledMap, RcnnCfg,
    RcnnHead, RcnnLoss, RcnnOutput, RoiSample, GRID_POINTS, GRID_SIZE,
};
pub use rpn::{
    build_targets, clip_to_range, decode_proposals, logit_offset, residual_offset, rpn_loss, ClsNormalizer,
    InferenceCfg, RpnHead, RpnLoss, RpnLossCfg, RpnTargets, CODE_SIZE,
};

use crate::error::Result;
use crate::tensor::{Graph, Var};

/// `λ·L_shape + L_rpn + L_rcnn`, omitting absent terms.
pub fn total_loss(g: &mut Graph, shape: Option<Var>, rpn: Var, rcnn: Option<Var>, lambda: f64) -> Result<Var> {
    let mut terms = Vec::with_capacity(3);
    if let Some(s) = shape {
        terms.push((s, lambda));
    }
    terms.push((rpn, 1.0));
    if let Some(r) = rcnn {
        terms.push((r, 1.0));
    }
    g.weighted_sum(&terms)
}
