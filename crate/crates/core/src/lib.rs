//! Radiograph classification toolkit.
//!
//! The crate is organised the way the pipeline runs:
//!
//! * [`tensor`] dense tensors, the layer kernels and a reverse-mode tape.
//! * [`preprocess`] the six-stage image pipeline (brightness, median, CLAHE,
//!   min-max normalisation, box mask, nearest resize).
//! * [`dataset`] manifest ingestion, class balancing and stratified folds.
//! * [`models`] model specs, the custom CNN and backbone builders, weight
//!   archives, Adam and the training loop.
//! * [`classical`] standardisation, CART trees, random forests and an SMO
//!   trained RBF SVM used on top of CNN features.
//! * [`eval`] confusion matrices, metrics, cross-validation and reports.

pub mod archive;
pub mod classical;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod label;
pub mod models;
pub mod preprocess;
pub mod tensor;

pub use error::{Error, Result};
pub use label::{ClassLabel, NUM_CLASSES};
