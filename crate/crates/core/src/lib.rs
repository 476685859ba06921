//! BloodNet: segmentation-dependent classification of intracranial
//! hemorrhage on head CT, built on a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autodiff`]: dense tensors and a tape-based graph with
//!   the convolution, pooling, dense and reduction primitives the networks use.
//! - [`optim`]: Adam with staircase exponential learning-rate decay.
//! - [`data`]: deterministic head phantoms, brain windowing and 5-slice
//!   context windows, plus the on-disk dataset layout.
//! - [`model`]: the single-task, multi-task and task-dependent networks and
//!   their checkpoint format.
//! - [`loss`]: binary cross-entropy for classification and segmentation and
//!   their convex blend.
//! - [`train`]: the three-stage training protocol with parameter freezing.
//! - [`eval`]: study-level max aggregation, ROC-AUC and bootstrap intervals.
//! - [`verify`]: finite-difference checks of every primitive and network.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
