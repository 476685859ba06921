//! The three network variants and their parameter checkpoints.
//!
//! All variants share a convolutional encoder that ends in a bottleneck
//! feature map. `SingleTask` global-average-pools it into a dense head.
//! `MultiTask` adds a decoder that predicts the centre-slice hemorrhage mask.
//! `TaskDependent` additionally sums the predicted mask, scales it by the
//! voxel volume and feeds the resulting blood-volume estimate (mm³) into
//! the classification head next to the pooled bottleneck features.

mod arch;
pub mod checkpoint;
mod net;

pub use arch::{ArchConfig, Init, ParamSpec, Variant, DEFAULT_VOXEL_VOLUME_MM3};
pub use net::{
    blood_volume_feature, volume_feature_graph, GraphOutputs, Model, ParamStore, Predictions,
};
