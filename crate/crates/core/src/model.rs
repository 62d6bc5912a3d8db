//! The full detector: optional shape completion, backbone, fusion, proposal head
//! and optional refinement, wired according to a [`ModelCfg`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adf::{Adf, AdfCfg};
use crate::detect::{
    assign_targets, build_targets, decode_proposals, rcnn_loss, refine_boxes, roi_grid_pool, rpn_loss, sample_rois,
    total_loss, AssignCfg, InferenceCfg, PooledMap, RcnnCfg, RcnnHead, RcnnLoss, RpnHead, RpnLoss, RpnLossCfg,
    CODE_SIZE,
};
use crate::error::{Error, Result};
use crate::geometry::{make_anchors, nms, AnchorClass, AnchorSet, Box3D, IouMetric, ScoredBox};
use crate::grid::BevGrid;
use crate::labels::ShapeHeatmap;
use crate::nn::{Forward, TopDown, TopDownCfg};
use crate::pillars::{PillarBatch, PillarEncoder};
use crate::psc::{psc_loss, stack_labels, Psc, PscCfg, PscOutput, ShapeLossCfg};
use crate::tensor::{sigmoid, Graph, ParamStore, Tensor, Var};

/// Where the shape heatmap fed to the detector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapSource {
    None,
    /// Ground-truth labels (oracle study).
    Gt,
    /// Predicted by the shape-completion network.
    Psc,
}

/// How the heatmap is combined with point features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    None,
    /// Heatmap channels concatenated to the pillar pseudo-image entering the backbone.
    Concat,
    /// Densification and attention on the backbone output.
    Adf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorCfg {
    pub pillar_channels: usize,
    pub backbone: TopDownCfg,
    pub adf: AdfCfg,
    pub anchors: Vec<AnchorClass>,
    pub assign: AssignCfg,
    pub loss: RpnLossCfg,
    pub inference: InferenceCfg,
    pub rcnn: RcnnCfg,
}

impl DetectorCfg {
    pub fn kitti() -> Self {
        DetectorCfg {
            pillar_channels: 64,
            backbone: TopDownCfg {
                block_channels: [64, 128, 256],
                block_strides: [2, 2, 2],
                layers_per_block: 4,
                upsample_channels: 128,
            },
            adf: AdfCfg {
                channels: 384,
                reduction: 8,
                attention: true,
            },
            anchors: vec![AnchorClass::car()],
            assign: AssignCfg::default(),
            loss: RpnLossCfg::default(),
            inference: InferenceCfg::default(),
            rcnn: RcnnCfg::default(),
        }
    }

    pub fn desk() -> Self {
        DetectorCfg {
            pillar_channels: 16,
            backbone: TopDownCfg {
                block_channels: [16, 32, 64],
                block_strides: [2, 2, 2],
                layers_per_block: 2,
                upsample_channels: 16,
            },
            adf: AdfCfg {
                channels: 48,
                reduction: 8,
                attention: true,
            },
            anchors: vec![AnchorClass::car()],
            assign: AssignCfg::default(),
            loss: RpnLossCfg::default(),
            inference: InferenceCfg::default(),
            rcnn: RcnnCfg {
                point_channels: 4,
                hidden: 32,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub heatmap: HeatmapSource,
    pub fusion: Fusion,
    /// Gaussian-rendered labels; binary occupancy otherwise.
    pub gaussian: bool,
    pub two_stage: bool,
    /// Keep the shape-completion weights at their initial values.
    pub psc_frozen: bool,
    pub max_points_per_pillar: usize,
    pub shape_loss: ShapeLossCfg,
    pub psc: PscCfg,
    pub detector: DetectorCfg,
}

impl ModelCfg {
    pub fn validate(&self) -> Result<()> {
        if self.fusion != Fusion::None && self.heatmap == HeatmapSource::None {
            return Err(Error::Config("fusion needs a heatmap source".into()));
        }
        if self.psc.classes != self.detector.anchors.len() {
            return Err(Error::Config(format!(
                "{} heatmap channels but {} anchor classes",
                self.psc.classes,
                self.detector.anchors.len()
            )));
        }
        if self.max_points_per_pillar == 0 {
            return Err(Error::Config("max_points_per_pillar must be positive".into()));
        }
        if !(self.detector.assign.neg_iou < self.detector.assign.pos_iou) {
            return Err(Error::Config("neg_iou must be below pos_iou".into()));
        }
        if !(self.shape_loss.alpha >= 0.0 && self.shape_loss.beta >= 0.0) {
            return Err(Error::Config("focal exponents must be non-negative".into()));
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.detector.anchors.len()
    }
}

/// One training or evaluation frame in model-ready form.
#[derive(Debug, Clone)]
pub struct Sample {
    pub pillars: PillarBatch,
    pub objects: Vec<(usize, Box3D)>,
    /// Shape label; required for heatmap sources `gt` and `psc`.
    pub label: Option<ShapeHeatmap>,
}

/// Independent RNG stream for one module's initialization.
pub fn module_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_PSC: u64 = 1;
const STREAM_BACKBONE: u64 = 2;
const STREAM_SIDE: u64 = 3;
const STREAM_ADF: u64 = 4;
const STREAM_RPN: u64 = 5;
const STREAM_RCNN: u64 = 6;

pub const PSC_PREFIX: &str = "psc.";

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelCfg,
    pub grid: BevGrid,
    pub feature_grid: BevGrid,
    pub anchors: AnchorSet,
    pub psc: Option<Psc>,
    encoder: PillarEncoder,
    backbone: TopDown,
    adf: Option<Adf>,
    rpn: RpnHead,
    rcnn: Option<RcnnHead>,
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub psc: Option<PscOutput>,
    /// The heatmap the detector consumed, at pillar resolution.
    pub shape: Option<Var>,
    pub features: Var,
    pub rpn_logits: Var,
    pub rpn_residuals: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub shape: Option<Var>,
    pub rpn: RpnLoss,
    pub rcnn: Option<RcnnLoss>,
    pub total: Var,
}

impl Model {
    pub fn new(store: &mut ParamStore, cfg: &ModelCfg, grid: &BevGrid, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let det = &cfg.detector;
        let feature_grid = grid.downsampled(det.backbone.output_stride())?;
        let anchors = make_anchors(&feature_grid, &det.anchors);
        let k = cfg.classes();
        let psc = if cfg.heatmap == HeatmapSource::Psc {
            let psc = Psc::new(store, "psc", &cfg.psc, &mut module_rng(seed, STREAM_PSC))?;
            if cfg.psc_frozen {
                store.set_frozen(PSC_PREFIX, true);
            }
            Some(psc)
        } else {
            None
        };
        let mut rng = module_rng(seed, STREAM_BACKBONE);
        let encoder = PillarEncoder::new(store, "det.pfn", det.pillar_channels, &mut rng)?;
        let mut side_rng = module_rng(seed, STREAM_SIDE);
        let side = (cfg.fusion == Fusion::Concat).then_some((k, &mut side_rng));
        let backbone = TopDown::new(
            store,
            "det.backbone",
            det.pillar_channels,
            &det.backbone,
            &mut rng,
            side,
        )?;
        let mut c = det.backbone.out_channels();
        let adf = if cfg.fusion == Fusion::Adf {
            let adf = Adf::new(store, "det.adf", c, k, &det.adf, &mut module_rng(seed, STREAM_ADF))?;
            c = det.adf.channels;
            Some(adf)
        } else {
            None
        };
        let rpn = RpnHead::new(
            store,
            "det.rpn",
            c,
            anchors.per_cell(),
            &mut module_rng(seed, STREAM_RPN),
        )?;
        let rcnn = if cfg.two_stage {
            let in_ch = k + 2 * c + 1;
            Some(RcnnHead::new(
                store,
                "det.rcnn",
                in_ch,
                &det.rcnn,
                &mut module_rng(seed, STREAM_RCNN),
            )?)
        } else {
            None
        };
        Ok(Model {
            cfg: cfg.clone(),
            grid: *grid,
            feature_grid,
            anchors,
            psc,
            encoder,
            backbone,
            adf,
            rpn,
            rcnn,
        })
    }

    fn gt_heatmap(&self, g: &mut Graph, samples: &[&Sample]) -> Result<Var> {
        let labels = samples
            .iter()
            .map(|s| {
                s.label
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput("sample without a shape label".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(g.constant(stack_labels(&labels)?))
    }

    pub fn forward(&self, g: &mut Graph, f: &mut Forward<'_>, samples: &[&Sample]) -> Result<ModelOutput> {
        let batches: Vec<&PillarBatch> = samples.iter().map(|s| &s.pillars).collect();
        let psc = match &self.psc {
            Some(p) => Some(p.forward(g, f, &batches)?),
            None => None,
        };
        let shape = match self.cfg.heatmap {
            HeatmapSource::None => None,
            HeatmapSource::Gt => Some(self.gt_heatmap(g, samples)?),
            HeatmapSource::Psc => psc.map(|p| p.shape),
        };
        let fp = self.encoder.forward(g, f, &batches)?;
        let side = if self.cfg.fusion == Fusion::Concat { shape } else { None };
        let fb = self.backbone.forward(g, f, fp, side)?;
        let features = match (&self.adf, shape) {
            (Some(adf), Some(s)) => adf.forward(g, f, fb, s)?.fused,
            _ => fb,
        };
        let (rpn_logits, rpn_residuals) = self.rpn.forward(g, f, features)?;
        Ok(ModelOutput {
            psc,
            shape,
            features,
            rpn_logits,
            rpn_residuals,
        })
    }

    /// Maps sampled for refinement: the heatmap (zeros without one), the fused
    /// features, and the features at half resolution.
    fn pooling_maps(&self, g: &mut Graph, out: &ModelOutput, n: usize) -> Result<(Var, Var, BevGrid)> {
        let shape = match out.shape {
            Some(s) => s,
            None => g.constant(Tensor::zeros(&[n, self.cfg.classes(), self.grid.nx(), self.grid.ny()])),
        };
        let half = g.avg_pool2d(out.features, 2)?;
        Ok((shape, half, self.feature_grid.downsampled(2)?))
    }

    fn proposals(&self, g: &Graph, out: &ModelOutput, frame: usize) -> Vec<ScoredBox> {
        let inf = &self.cfg.detector.inference;
        let a = self.anchors.len();
        let logits = &g.value(out.rpn_logits).data()[frame * a..(frame + 1) * a];
        let res = &g.value(out.rpn_residuals).data()[frame * a * CODE_SIZE..(frame + 1) * a * CODE_SIZE];
        decode_proposals(
            logits,
            res,
            &self.anchors,
            inf.pre_nms_top,
            inf.proposal_nms,
            inf.proposals_keep,
        )
    }

    pub fn loss(&self, g: &mut Graph, f: &Forward<'_>, out: &ModelOutput, samples: &[&Sample]) -> Result<LossTerms> {
        let det = &self.cfg.detector;
        let shape = match &out.psc {
            Some(p) => {
                let labels = samples
                    .iter()
                    .map(|s| {
                        s.label
                            .as_ref()
                            .ok_or_else(|| Error::InvalidInput("sample without a shape label".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let target = stack_labels(&labels)?;
                Some(psc_loss(g, p.logits, &target, &self.cfg.shape_loss)?)
            }
            None => None,
        };
        let gts: Vec<Vec<(usize, Box3D)>> = samples.iter().map(|s| s.objects.clone()).collect();
        let assignments: Vec<_> = gts
            .iter()
            .map(|o| assign_targets(&self.anchors, o, &det.assign))
            .collect();
        let targets = build_targets(&self.anchors, &assignments, &gts)?;
        let rpn = rpn_loss(g, out.rpn_logits, out.rpn_residuals, &targets, &det.loss)?;
        let rcnn = match &self.rcnn {
            Some(head) => {
                let mut rois = Vec::new();
                let mut samples_all = Vec::new();
                for (b, objs) in gts.iter().enumerate() {
                    let props: Vec<Box3D> = self.proposals(g, out, b).into_iter().map(|d| d.bbox).collect();
                    let boxes: Vec<Box3D> = objs.iter().map(|o| o.1).collect();
                    for s in sample_rois(&props, &boxes, &det.assign) {
                        rois.push((b, s.proposal));
                        samples_all.push(s);
                    }
                }
                if rois.is_empty() {
                    None
                } else {
                    let (shape_map, half, half_grid) = self.pooling_maps(g, out, samples.len())?;
                    let maps = [
                        PooledMap {
                            map: shape_map,
                            grid: &self.grid,
                        },
                        PooledMap {
                            map: out.features,
                            grid: &self.feature_grid,
                        },
                        PooledMap {
                            map: half,
                            grid: &half_grid,
                        },
                    ];
                    let pooled = roi_grid_pool(g, &rois, &maps)?;
                    let pred = head.forward(g, f, pooled)?;
                    Some(rcnn_loss(
                        g,
                        &pred,
                        &samples_all,
                        det.assign.roi_fg_iou,
                        det.loss.smooth_l1_delta,
                    )?)
                }
            }
            None => None,
        };
        let lambda = if out.psc.is_some() {
            self.cfg.shape_loss.lambda
        } else {
            0.0
        };
        let total = total_loss(g, shape, rpn.total, rcnn.map(|r| r.total), lambda)?;
        Ok(LossTerms {
            shape,
            rpn,
            rcnn,
            total,
        })
    }

    /// Final detections per frame.
    pub fn predict(&self, g: &mut Graph, f: &Forward<'_>, out: &ModelOutput) -> Result<Vec<Vec<ScoredBox>>> {
        let inf = &self.cfg.detector.inference;
        let n = g.shape(out.rpn_logits)[0];
        let mut per_frame: Vec<Vec<ScoredBox>> = (0..n).map(|b| self.proposals(g, out, b)).collect();
        if let Some(head) = &self.rcnn {
            let rois: Vec<(usize, Box3D)> = per_frame
                .iter()
                .enumerate()
                .flat_map(|(b, d)| d.iter().map(move |s| (b, s.bbox)))
                .collect();
            if !rois.is_empty() {
                let (shape_map, half, half_grid) = self.pooling_maps(g, out, n)?;
                let maps = [
                    PooledMap {
                        map: shape_map,
                        grid: &self.grid,
                    },
                    PooledMap {
                        map: out.features,
                        grid: &self.feature_grid,
                    },
                    PooledMap {
                        map: half,
                        grid: &half_grid,
                    },
                ];
                let pooled = roi_grid_pool(g, &rois, &maps)?;
                let pred = head.forward(g, f, pooled)?;
                let conf = g.value(pred.conf).data().to_vec();
                let reg = g.value(pred.reg).data().to_vec();
                let boxes: Vec<Box3D> = rois.iter().map(|r| r.1).collect();
                let refined = refine_boxes(&boxes, &reg);
                let mut k = 0;
                for dets in per_frame.iter_mut() {
                    for d in dets.iter_mut() {
                        d.bbox = refined[k];
                        d.score = sigmoid(conf[k]);
                        k += 1;
                    }
                }
            }
        }
        Ok(per_frame
            .into_iter()
            .map(|dets| {
                let kept: Vec<ScoredBox> = dets
                    .into_iter()
                    .filter(|d| d.score >= inf.score_threshold && d.bbox.is_valid())
                    .collect();
                let mut out = nms(&kept, inf.final_nms, IouMetric::Bev);
                out.truncate(inf.max_detections);
                out
            })
            .collect())
    }
}
