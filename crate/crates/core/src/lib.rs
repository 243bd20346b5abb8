//! DW-DGAT: dynamically weighted dual graph attention for imbalanced
//! cohort classification over fused multi-form ROI features.
//!
//! The crate is organized bottom-up:
//! - [`tensor`], [`optim`], [`gradcheck`]: the differentiable substrate
//! - [`fusion`]: 1D/2D/3D ROI feature fusion into the per-sample matrix X
//! - [`sga`]: centrality pooling + transformer encoder over ROIs
//! - [`gga`]: phenotype adjacency graph + attention graph convolutions
//! - [`cwg`]: class weight generator and the cooperative losses
//! - [`trainer`]: grouped cross-validation, metrics, cost estimation
//! - [`datagen`]: synthetic cohort generation and the dataset container
//! - [`ledger`]: executable equation-to-test coverage check

pub mod config;
pub mod cwg;
pub mod datagen;
pub mod error;
pub mod fusion;
pub mod gga;
pub mod gradcheck;
pub mod ledger;
pub mod nn;
pub mod optim;
pub mod sga;
pub mod tensor;
pub mod trainer;

pub use config::{Profile, TrainConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
