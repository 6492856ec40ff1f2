//! Depth-guided low-light image enhancement.
//!
//! A small enhancement U-Net whose encoder levels are refined by depth-guided
//! fusion blocks, a lightweight depth branch distilled from a depth teacher,
//! a procedural benchmark in which illumination depends on scene geometry,
//! and the training, evaluation and ablation machinery around them.

#![allow(clippy::needless_range_loop)]

pub mod ablation;
pub mod array_io;
pub mod checkpoint;
pub mod depth;
pub mod digest;
pub mod enhancer;
pub mod error;
pub mod fusion;
pub mod graph;
pub mod kernels;
mod layers;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use depth::{
    DepthBranch, DepthMap, DepthPyramid, FileTeacher, SyntheticTeacher, TeacherDepthProvider,
};
pub use enhancer::{ablation_wiring, FusionMode, ImageBatch, Model, ModelConfig, Wiring};
pub use error::{Error, Result};
pub use fusion::{AttentionMatrix, FeatureMap, FusionVariant, HdgffmParams, Tau};
pub use graph::{Graph, Var};
pub use params::ParamSet;
pub use tensor::{Real, Tensor};
