//! Declarative run configuration read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adf::AdfCfg;
use crate::data::{AugmentCfg, DifficultyRule, SynthSceneCfg};
use crate::error::{Error, Result};
use crate::geometry::IouMetric;
use crate::grid::BevGrid;
use crate::model::{DetectorCfg, Fusion, HeatmapSource, ModelCfg};
use crate::pillars::DEFAULT_MAX_POINTS;
use crate::psc::{PscCfg, ShapeLossCfg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Kitti,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "kitti" => Ok(Profile::Kitti),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCfg {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub z_range: (f64, f64),
    pub cell: (f64, f64, f64),
}

impl GridCfg {
    pub fn build(&self) -> Result<BevGrid> {
        BevGrid::new(self.x_range, self.y_range, self.z_range, self.cell)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataCfg {
    /// Frames generated by `synth`.
    pub frames: usize,
    /// The first `train_frames` ids train; the rest evaluate.
    pub train_frames: usize,
    pub difficulty: DifficultyRule,
    pub augment: bool,
    pub augmentation: AugmentCfg,
    pub synth: SynthSceneCfg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelCfg {
    /// Donor shapes retrieved per object.
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    /// Gradient norm cap; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub iou_threshold: f64,
    pub metric: IouMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsCfg {
    pub data: PathBuf,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub grid: GridCfg,
    pub data: DataCfg,
    pub labels: LabelCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub eval: EvalSection,
    pub paths: PathsCfg,
}

impl RunConfig {
    /// Small grid, narrow networks, and a short schedule for one CPU.
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            seed: 0,
            grid: GridCfg {
                x_range: (0.0, 20.48),
                y_range: (-10.24, 10.24),
                z_range: (-3.0, 1.0),
                cell: (0.32, 0.32, 4.0),
            },
            data: DataCfg {
                frames: 200,
                train_frames: 160,
                difficulty: DifficultyRule::Synthetic,
                augment: false,
                augmentation: AugmentCfg::default(),
                synth: SynthSceneCfg::desk(0),
            },
            labels: LabelCfg { top_k: 3 },
            model: ModelCfg {
                heatmap: HeatmapSource::Psc,
                fusion: Fusion::Adf,
                gaussian: true,
                two_stage: false,
                psc_frozen: false,
                max_points_per_pillar: DEFAULT_MAX_POINTS,
                shape_loss: ShapeLossCfg::default(),
                psc: PscCfg::desk(),
                detector: DetectorCfg::desk(),
            },
            train: TrainCfg {
                steps: 500,
                batch_size: 2,
                lr: 0.01,
                lr_floor: 1e-4,
                grad_clip: 10.0,
            },
            eval: EvalSection {
                iou_threshold: 0.7,
                metric: IouMetric::Iou3d,
            },
            paths: PathsCfg {
                data: PathBuf::from("data/synth"),
                out: PathBuf::from("runs"),
            },
        }
    }

    /// Full-size grid, widths and schedule.
    pub fn kitti() -> Self {
        RunConfig {
            profile: Profile::Kitti,
            seed: 0,
            grid: GridCfg {
                x_range: (0.0, 69.12),
                y_range: (-39.68, 39.68),
                z_range: (-3.0, 1.0),
                cell: (0.16, 0.16, 4.0),
            },
            data: DataCfg {
                frames: 7481,
                train_frames: 3712,
                difficulty: DifficultyRule::Kitti,
                augment: true,
                augmentation: AugmentCfg::default(),
                synth: SynthSceneCfg::kitti(0),
            },
            labels: LabelCfg { top_k: 3 },
            model: ModelCfg {
                heatmap: HeatmapSource::Psc,
                fusion: Fusion::Adf,
                gaussian: true,
                two_stage: true,
                psc_frozen: false,
                max_points_per_pillar: DEFAULT_MAX_POINTS,
                shape_loss: ShapeLossCfg::default(),
                psc: PscCfg::kitti(),
                detector: DetectorCfg {
                    adf: AdfCfg {
                        channels: 384,
                        ..DetectorCfg::kitti().adf
                    },
                    ..DetectorCfg::kitti()
                },
            },
            train: TrainCfg {
                steps: 80 * 3712 / 8,
                batch_size: 8,
                lr: 0.01,
                lr_floor: 1e-6,
                grad_clip: 10.0,
            },
            eval: EvalSection {
                iou_threshold: 0.7,
                metric: IouMetric::Iou3d,
            },
            paths: PathsCfg {
                data: PathBuf::from("data/kitti/training"),
                out: PathBuf::from("runs"),
            },
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Kitti => Self::kitti(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        self.model.validate()?;
        self.data.synth.validate()?;
        if self.data.train_frames == 0 || self.data.train_frames > self.data.frames {
            return Err(Error::Config(format!(
                "train_frames {} must be in 1..={}",
                self.data.train_frames, self.data.frames
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.train.lr > 0.0 && self.train.lr_floor >= 0.0 && self.train.lr_floor <= self.train.lr) {
            return Err(Error::Config("learning rate schedule out of range".into()));
        }
        if !(self.train.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if !(self.eval.iou_threshold > 0.0 && self.eval.iou_threshold <= 1.0) {
            return Err(Error::Config("IoU threshold outside (0, 1]".into()));
        }
        if self.labels.top_k == 0 {
            return Err(Error::Config("top_k must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Sets the seed everywhere it is consumed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.synth.seed = seed;
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate_and_round_trip() {
        for cfg in [RunConfig::desk(), RunConfig::kitti()] {
            cfg.validate().unwrap();
            assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let text = RunConfig::desk()
            .to_toml()
            .replace("[train]\n", "[train]\nmomentum = 0.9\n");
        let err = RunConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn desk_grid_is_64_square() {
        let g = RunConfig::desk().grid.build().unwrap();
        assert_eq!((g.nx(), g.ny()), (64, 64));
    }
}
