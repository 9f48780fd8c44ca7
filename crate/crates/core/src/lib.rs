//! Benchmark harness and trainable CNN baselines for edge-preserving image
//! smoothing against multiple vote-weighted groundtruths.

pub mod applications;
pub mod autodiff;
pub mod dataset;
pub mod grid;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use grid::{Choice, ImageId};
pub use image::Image;
pub use losses::{GroundTruthSet, LossKind, NeighborhoodSpec};
pub use tensor::{Tensor, TensorError};
