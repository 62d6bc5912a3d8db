//! Pillar-based shape completion: the occupancy network, its focal loss, and
//! the thresholded shape heatmap.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::ShapeHeatmap;
use crate::nn::{Conv2d, ConvBnRelu, Forward, TopDown, TopDownCfg};
use crate::pillars::{PillarBatch, PillarEncoder};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Prior probability encoded in the final bias.
pub const PRIOR_PROBABILITY: f64 = 0.01;

pub const SHAPE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PscCfg {
    pub pillar_channels: usize,
    pub backbone: TopDownCfg,
    pub head_channels: usize,
    pub classes: usize,
}

impl PscCfg {
    pub fn kitti() -> Self {
        PscCfg {
            pillar_channels: 64,
            backbone: TopDownCfg {
                block_channels: [64, 128, 256],
                block_strides: [1, 2, 2],
                layers_per_block: 2,
                upsample_channels: 128,
            },
            head_channels: 64,
            classes: 1,
        }
    }

    pub fn desk() -> Self {
        PscCfg {
            pillar_channels: 16,
            backbone: TopDownCfg {
                block_channels: [8, 16, 32],
                block_strides: [1, 2, 2],
                layers_per_block: 2,
                upsample_channels: 16,
            },
            head_channels: 8,
            classes: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeLossCfg {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for ShapeLossCfg {
    fn default() -> Self {
        ShapeLossCfg {
            alpha: 2.0,
            beta: 4.0,
            lambda: 6.0,
        }
    }
}

/// The occupancy network: top-down backbone, two conv+BN+ReLU head layers and a
/// final `K`-channel conv whose weights start at zero.
#[derive(Debug, Clone)]
pub struct OccupancyNet {
    pub backbone: TopDown,
    head: [ConvBnRelu; 2],
    out: Conv2d,
}

impl OccupancyNet {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cfg: &PscCfg, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.backbone.output_stride() != 1 {
            return Err(Error::Config("the occupancy network predicts at stride 1".into()));
        }
        let backbone = TopDown::new(store, &format!("{name}.backbone"), cin, &cfg.backbone, rng, None)?;
        let c = cfg.backbone.out_channels();
        let hc = cfg.head_channels;
        let head = [
            ConvBnRelu::new(store, &format!("{name}.head0"), c, hc, 3, 1, rng)?,
            ConvBnRelu::new(store, &format!("{name}.head1"), hc, hc, 3, 1, rng)?,
        ];
        let out = Conv2d::new(store, &format!("{name}.out"), hc, cfg.classes, 3, 1, 1, true, rng)?;
        store.value_mut(out.w).fill(0.0);
        let bias = -((1.0 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY).ln();
        store.value_mut(out.b.expect("output conv has a bias")).fill(bias);
        Ok(OccupancyNet { backbone, head, out })
    }

    /// Pre-sigmoid occupancy logits `[N, K, H, W]`.
    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, fp: Var) -> Result<Var> {
        let h = self.backbone.forward(g, f, fp, None)?;
        let h = self.head[0].forward(g, f, h)?;
        let h = self.head[1].forward(g, f, h)?;
        self.out.forward(g, f, h)
    }
}

/// Pillar encoder followed by the occupancy network.
#[derive(Debug, Clone)]
pub struct Psc {
    pub cfg: PscCfg,
    pub encoder: PillarEncoder,
    pub net: OccupancyNet,
}

/// Outputs of one PSC pass.
#[derive(Debug, Clone, Copy)]
pub struct PscOutput {
    pub logits: Var,
    pub probs: Var,
    /// Probabilities with sub-threshold values zeroed.
    pub shape: Var,
}

impl Psc {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &PscCfg, rng: &mut ChaCha8Rng) -> Result<Self> {
        let encoder = PillarEncoder::new(store, &format!("{name}.pfn"), cfg.pillar_channels, rng)?;
        let net = OccupancyNet::new(store, &format!("{name}.omega"), cfg.pillar_channels, cfg, rng)?;
        Ok(Psc {
            cfg: cfg.clone(),
            encoder,
            net,
        })
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, batches: &[&PillarBatch]) -> Result<PscOutput> {
        let fp = self.encoder.forward(g, f, batches)?;
        let logits = self.net.forward(g, f, fp)?;
        let probs = g.sigmoid(logits);
        let shape = threshold_heatmap(g, probs);
        Ok(PscOutput { logits, probs, shape })
    }
}

/// Zeroes probabilities below 0.5 and keeps the rest unchanged.
pub fn threshold_heatmap(g: &mut Graph, probs: Var) -> Var {
    g.threshold_mask(probs, SHAPE_THRESHOLD)
}

/// Stacks per-frame labels into one `[N, K, H, W]` target.
pub fn stack_labels(labels: &[&ShapeHeatmap]) -> Result<Tensor> {
    let Some(first) = labels.first() else {
        return Err(Error::InvalidInput("no labels to stack".into()));
    };
    let (k, h, w) = (first.channels(), first.grid().nx(), first.grid().ny());
    let mut data = Vec::with_capacity(labels.len() * k * h * w);
    for l in labels {
        if l.channels() != k || l.grid() != first.grid() {
            return Err(Error::Shape("labels in one batch differ in shape".into()));
        }
        data.extend(l.data().iter().map(|&v| v as f64));
    }
    Tensor::from_vec(&[labels.len(), k, h, w], data)
}

/// Focal shape loss of the predicted logits against the label maps.
pub fn psc_loss(g: &mut Graph, logits: Var, target: &Tensor, cfg: &ShapeLossCfg) -> Result<Var> {
    if g.shape(logits) != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and label {:?} differ",
            g.shape(logits),
            target.shape()
        )));
    }
    if target.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
        return Err(Error::InvalidInput("shape label outside [0, 1]".into()));
    }
    g.shape_focal_loss(logits, target.data(), cfg.alpha, cfg.beta)
}

/// IoU of `{Ŷ ≥ 0.5}` against `{label ≥ 0.5}`; 1 when both are empty.
pub fn mask_iou(probs: &[f64], label: &[f64]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &y) in probs.iter().zip(label) {
        let a = p >= SHAPE_THRESHOLD;
        let b = y >= SHAPE_THRESHOLD;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
