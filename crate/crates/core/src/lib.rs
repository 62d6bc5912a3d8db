//! LiDAR 3D object detection with bird's-eye-view shape heatmaps.

pub mod adf;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grid;
pub mod labels;
pub mod model;
pub mod nn;
pub mod pillars;
pub mod pipeline;
pub mod psc;
pub mod tensor;

pub use config::RunConfig;
pub use data::{Frame, Object};
pub use error::{Error, Result};
pub use geometry::{Box3D, IouMetric, ScoredBox};
pub use grid::BevGrid;
pub use labels::ShapeHeatmap;
pub use model::{Model, ModelCfg};
pub use tensor::{Graph, ParamStore, Tensor, Var};
