//! Speaker eigen-spaces over fine-tuned model checkpoints.
//!
//! Task vectors of N fine-tuned checkpoints (all sharing one pre-trained initialization) are
//! flattened, standardized per parameter, and factorized through their N x N Gram matrix. The
//! resulting basis spans a low-dimensional "speaker space" in parameter space: stored coefficient
//! vectors reproduce the base checkpoints, Gaussian coefficient draws with variance 1/N produce new
//! checkpoints with matching first and second moments, and individual coefficient axes can be
//! flipped to move a model across the dominant attribute direction.
//!
//! Modules, bottom-up:
//!
//! - [`ckptio`]: the EVC1 checkpoint container.
//! - [`taskvec`]: flatten schemas, task vectors and the EVV1 vector format.
//! - [`eigenspace`]: standardization, Gram-path SVD, projection and coefficient sampling.
//! - [`editor`]: checkpoint synthesis, two-model interpolation, axis flipping.
//! - [`analysis`]: cosine-similarity reports and coefficient scatter tables.
//! - [`synthgen`]: synthetic corpora with a planted binary factor.
//! - [`cli`]: the `eigenmerge` command-line driver.

pub mod analysis;
pub mod ckptio;
pub mod cli;
pub mod editor;
pub mod eigenspace;
pub mod error;
pub mod synthgen;
pub mod taskvec;

pub use ckptio::{read_checkpoint, write_checkpoint, Checkpoint, DType, Tensor};
pub use error::{Error, Result};
pub use taskvec::{FlatVector, FlattenSchema, ParamFilter};

/// Metadata key under which synthesized checkpoints record how they were made.
pub const PROVENANCE_KEY: &str = "eigenmerge.provenance";
