use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assign::{Assignment, LABEL_POSITIVE};
use crate::error::{Error, Result};
use crate::geometry::{argsort_desc, decode_box, encode_box, nms, AnchorSet, Box3D, IouMetric, ScoredBox};
use crate::nn::{Conv2d, Forward};
use crate::psc::PRIOR_PROBABILITY;
use crate::tensor::{sigmoid, Graph, ParamStore, Var};

pub const CODE_SIZE: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpnLossCfg {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub smooth_l1_delta: f64,
    pub cls_normalizer: ClsNormalizer,
}

/// Divisor of the summed focal classification term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClsNormalizer {
    /// Number of positive anchors (at least one).
    Positives,
    /// Number of non-ignored anchors. Thousands per frame, which leaves the
    /// classifier with almost no gradient next to the regression term.
    Counted,
}

impl Default for RpnLossCfg {
    fn default() -> Self {
        RpnLossCfg {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            smooth_l1_delta: 1.0 / 9.0,
            cls_normalizer: ClsNormalizer::Positives,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceCfg {
    pub pre_nms_top: usize,
    pub proposal_nms: f64,
    pub proposals_keep: usize,
    pub final_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceCfg {
    fn default() -> Self {
        InferenceCfg {
            pre_nms_top: 512,
            proposal_nms: 0.7,
            proposals_keep: 100,
            final_nms: 0.01,
            score_threshold: 0.01,
            max_detections: 100,
        }
    }
}

/// 1×1 convolutions producing per-anchor logits `[N, A, H, W]` and residuals
/// `[N, 7A, H, W]` (channel `a·7 + j`).
#[derive(Debug, Clone)]
pub struct RpnHead {
    pub cls: Conv2d,
    pub reg: Conv2d,
    pub anchors_per_cell: usize,
}

impl RpnHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        anchors_per_cell: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cls = Conv2d::new(store, &format!("{name}.cls"), cin, anchors_per_cell, 1, 1, 0, true, rng)?;
        let bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        store.value_mut(cls.b.expect("cls conv has a bias")).fill(bias);
        let reg = Conv2d::new(
            store,
            &format!("{name}.reg"),
            cin,
            CODE_SIZE * anchors_per_cell,
            1,
            1,
            0,
            true,
            rng,
        )?;
        // Small initial residuals keep early decoded boxes near their anchors.
        store.value_mut(reg.w).iter_mut().for_each(|w| *w *= 0.01);
        Ok(RpnHead {
            cls,
            reg,
            anchors_per_cell,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &Forward<'_>, x: Var) -> Result<(Var, Var)> {
        Ok((self.cls.forward(g, f, x)?, self.reg.forward(g, f, x)?))
    }
}

/// Position of anchor `index`'s logit within one frame's `[A, H, W]` block.
pub fn logit_offset(anchors: &AnchorSet, index: usize) -> usize {
    let a = index % anchors.per_cell();
    let cell = index / anchors.per_cell();
    a * anchors.grid().num_cells() + cell
}

/// Position of coordinate `j` of anchor `index` within one frame's `[7A, H, W]` block.
pub fn residual_offset(anchors: &AnchorSet, index: usize, j: usize) -> usize {
    let a = index % anchors.per_cell();
    let cell = index / anchors.per_cell();
    (a * CODE_SIZE + j) * anchors.grid().num_cells() + cell
}

/// Dense per-element targets of a batch laid out like the head outputs.
#[derive(Debug, Clone)]
pub struct RpnTargets {
    pub labels: Vec<i8>,
    pub residuals: Vec<f64>,
    pub weights: Vec<f64>,
    pub num_positive: usize,
    pub num_counted: usize,
}

pub fn build_targets(
    anchors: &AnchorSet,
    assignments: &[Assignment],
    gts: &[Vec<(usize, Box3D)>],
) -> Result<RpnTargets> {
    let a = anchors.len();
    let n = assignments.len();
    let mut t = RpnTargets {
        labels: vec![0; n * a],
        residuals: vec![0.0; n * a * CODE_SIZE],
        weights: vec![0.0; n * a * CODE_SIZE],
        num_positive: 0,
        num_counted: 0,
    };
    for (b, asg) in assignments.iter().enumerate() {
        if asg.labels.len() != a {
            return Err(Error::Shape("assignment does not match anchor set".into()));
        }
        t.num_positive += asg.num_positive();
        t.num_counted += asg.num_counted();
        for i in 0..a {
            t.labels[b * a + logit_offset(anchors, i)] = asg.labels[i];
            if asg.labels[i] != LABEL_POSITIVE {
                continue;
            }
            let gi = asg.matched[i].ok_or_else(|| Error::InvalidInput("positive anchor without a match".into()))?;
            let code = encode_box(&gts[b][gi].1, &anchors.boxes()[i])?;
            for (j, c) in code.iter().enumerate() {
                let k = b * a * CODE_SIZE + residual_offset(anchors, i, j);
                t.residuals[k] = *c;
                t.weights[k] = 1.0;
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy)]
pub struct RpnLoss {
    pub cls: Var,
    pub reg: Var,
    pub total: Var,
    /// No positive anchors in the batch, so the regression term is zero.
    pub no_positives: bool,
}

/// Focal classification summed and divided per `cfg.cls_normalizer`, plus
/// smooth-L1 regression averaged over positives.
pub fn rpn_loss(g: &mut Graph, logits: Var, residuals: Var, targets: &RpnTargets, cfg: &RpnLossCfg) -> Result<RpnLoss> {
    let cls = g.sigmoid_focal_loss(
        logits,
        &targets.labels,
        cfg.focal_alpha,
        cfg.focal_gamma,
        match cfg.cls_normalizer {
            ClsNormalizer::Positives => targets.num_positive.max(1) as f64,
            ClsNormalizer::Counted => targets.num_counted as f64,
        },
    )?;
    let reg = g.smooth_l1_loss(
        residuals,
        &targets.residuals,
        &targets.weights,
        cfg.smooth_l1_delta,
        targets.num_positive as f64,
    )?;
    let total = g.weighted_sum(&[(cls, 1.0), (reg, 1.0)])?;
    Ok(RpnLoss {
        cls,
        reg,
        total,
        no_positives: targets.num_positive == 0,
    })
}

/// Moves a box center inside the grid's BEV footprint.
pub fn clip_to_range(b: &Box3D, anchors: &AnchorSet) -> Box3D {
    let grid = anchors.grid();
    let (x0, x1) = grid.x_range();
    let (y0, y1) = grid.y_range();
    let mut out = *b;
    out.x = out.x.clamp(x0, x1);
    out.y = out.y.clamp(y0, y1);
    out
}

/// Scores, decodes and suppresses one frame's anchors.
///
/// `logits` and `residuals` are that frame's `[A, H, W]` and `[7A, H, W]` blocks.
pub fn decode_proposals(
    logits: &[f64],
    residuals: &[f64],
    anchors: &AnchorSet,
    top: usize,
    nms_thresh: f64,
    keep: usize,
) -> Vec<ScoredBox> {
    let n = anchors.len();
    let scores: Vec<f64> = (0..n).map(|i| sigmoid(logits[logit_offset(anchors, i)])).collect();
    let order = argsort_desc(&scores);
    let dets: Vec<ScoredBox> = order
        .into_iter()
        .take(top)
        .map(|i| {
            let mut code = [0.0; CODE_SIZE];
            for (j, c) in code.iter_mut().enumerate() {
                *c = residuals[residual_offset(anchors, i, j)];
            }
            let decoded = decode_box(&code, &anchors.boxes()[i]);
            ScoredBox {
                bbox: clip_to_range(&decoded, anchors),
                score: scores[i],
                class_id: anchors.class_of(i),
            }
        })
        .collect();
    let mut kept = nms(&dets, nms_thresh, IouMetric::Bev);
    kept.truncate(keep);
    kept
}
