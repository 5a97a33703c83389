//! Convex surrogates for the Jaccard (intersection-over-union) loss built
//! from the Lovász extension of submodular set functions.
//!
//! - [`submodular`]: set functions, the Lovász extension, a level-set oracle
//!   and an exhaustive submodularity check.
//! - [`jaccard`]: the Jaccard set function, its fast extension gradient, and
//!   the loss layers (Lovász hinge, Lovász-Softmax, cross-entropy, hinge,
//!   and a ratio-of-sums IoU baseline).
//! - [`metrics`]: per-class IoU, Dice, and image/batch/dataset mIoU.
//! - [`optim`]: poly schedule, momentum, and proximal steps.
//! - [`harness`]: synthetic data, bias sweeps, a linear pixel classifier
//!   trainer and metric probes.
//! - [`io`]: PGM masks, raw float fields and CSV tables.
//! - [`verify`]: numerical checks shared by the test suites and the CLI.

pub mod error;
pub mod harness;
pub mod io;
pub mod jaccard;
pub mod metrics;
pub mod optim;
pub mod submodular;
pub mod verify;

pub use error::{Error, Result};
pub use jaccard::{ClassMode, LossOutput};
pub use submodular::{ExtensionResult, Permutation, SetFunction};
