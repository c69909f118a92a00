//! Adaptive data augmentation for small image classifiers.
//!
//! The crate trains a classifier while steering a randomly sampled
//! augmentation pipeline against it: every batch, the discrete pipeline
//! parameters are nudged one lattice step in the direction that a
//! finite-difference probe says will raise (or lower) the training loss.

pub mod adapt;
pub mod augment;
pub mod config;
pub mod data;
pub mod digest;
pub mod error;
pub mod nn;
pub mod oracle;
pub mod report;
pub mod rng;
pub mod trainer;

pub use augment::{
    apply_op, apply_pipeline, sample_pipeline, Extent, OpInstance, OpKind, ParamLocator,
    Pipeline, Registry,
};
pub use data::{load_dataset, DataSource, Dataset, DatasetSpec, ImageBatch, SplitDataset};
pub use error::{Error, Result};
