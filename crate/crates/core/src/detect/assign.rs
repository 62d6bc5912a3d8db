use serde::{Deserialize, Serialize};

use crate::geometry::{bev_iou, AnchorSet, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignCfg {
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Proposals sampled per frame for refinement training.
    pub roi_samples: usize,
    pub roi_fg_fraction: f64,
    pub roi_fg_iou: f64,
}

impl Default for AssignCfg {
    fn default() -> Self {
        AssignCfg {
            pos_iou: 0.6,
            neg_iou: 0.45,
            roi_samples: 128,
            roi_fg_fraction: 0.5,
            roi_fg_iou: 0.55,
        }
    }
}

pub const LABEL_POSITIVE: i8 = 1;
pub const LABEL_NEGATIVE: i8 = 0;
pub const LABEL_IGNORE: i8 = -1;

/// Per-anchor labels in anchor-index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub labels: Vec<i8>,
    /// Ground-truth index of every positive anchor.
    pub matched: Vec<Option<usize>>,
}

impl Assignment {
    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l == LABEL_POSITIVE).count()
    }

    pub fn num_counted(&self) -> usize {
        self.labels.iter().filter(|&&l| l != LABEL_IGNORE).count()
    }
}

/// Labels anchors by BEV IoU against same-class boxes.
///
/// Positive at `IoU ≥ pos_iou`, negative below `neg_iou`, ignored between. Every
/// box also claims its best anchor (lowest index on ties) as positive.
pub fn assign_targets(anchors: &AnchorSet, gts: &[(usize, Box3D)], cfg: &AssignCfg) -> Assignment {
    let n = anchors.len();
    let mut best_iou = vec![0.0f64; n];
    let mut best_gt: Vec<Option<usize>> = vec![None; n];
    let mut forced: Vec<(usize, usize)> = Vec::new();
    let boxes = anchors.boxes();
    for (gi, &(class, gt)) in gts.iter().enumerate() {
        let reach = gt.bev_radius();
        let mut gt_best = (0.0f64, None);
        for (ai, a) in boxes.iter().enumerate() {
            if anchors.class_of(ai) != class {
                continue;
            }
            let d = (a.x - gt.x).hypot(a.y - gt.y);
            if d >= reach + a.bev_radius() {
                continue;
            }
            let iou = bev_iou(a, &gt);
            if iou > best_iou[ai] {
                best_iou[ai] = iou;
                best_gt[ai] = Some(gi);
            }
            if iou > gt_best.0 {
                gt_best = (iou, Some(ai));
            }
        }
        if let (iou, Some(ai)) = gt_best {
            if iou > 0.0 {
                forced.push((ai, gi));
            }
        }
    }
    let mut labels = vec![LABEL_NEGATIVE; n];
    let mut matched = vec![None; n];
    for ai in 0..n {
        if best_iou[ai] >= cfg.pos_iou {
            labels[ai] = LABEL_POSITIVE;
            matched[ai] = best_gt[ai];
        } else if best_iou[ai] >= cfg.neg_iou {
            labels[ai] = LABEL_IGNORE;
        }
    }
    for (ai, gi) in forced {
        labels[ai] = LABEL_POSITIVE;
        if matched[ai].is_none() {
            matched[ai] = Some(gi);
        }
    }
    Assignment { labels, matched }
}
