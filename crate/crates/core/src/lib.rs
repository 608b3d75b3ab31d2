//! Interpolation-free tri-plane lifting for voxel CNNs.
//!
//! A volume is averaged onto three orthogonal planes, each plane is encoded
//! by a small 2D CNN, and the plane features are broadcast back along their
//! missing axis and summed with learned weights. An optional low-resolution
//! 3D branch adds coarse volumetric context before a per-voxel mixer.

pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod config;
pub mod error;
pub mod flops;
pub mod model;
pub mod nn;
pub mod posmod;
pub mod tasks;
pub mod tensor;
pub mod volumetric;
pub mod vxg;

pub use autodiff::{Tape, Var};
pub use config::{ModelConfig, PeMode, Task, Variant};
pub use error::{Error, Result};
pub use model::{Forward, Model, Route, Stage, StageFlops};
pub use tensor::{Real, Shape, Tensor};
