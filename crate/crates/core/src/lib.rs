//! Feature-map-flow 3D detection on point clouds: voxelization, a pillar
//! backbone, temporal BEV aggregation, a center-based head, decoding and
//! nuScenes-style metrics, all trainable through a small reverse-mode tape.

pub mod ablation;
pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod fmf;
pub mod gradcheck;
pub mod gradsuite;
pub mod head;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod schedule;
pub mod synth;
pub mod targets;
pub mod train;
pub mod tensor;
pub mod types;
pub mod voxel;

pub use error::{Error, Result};
