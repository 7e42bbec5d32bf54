//! Fingerprinting classifiers with core points.
//!
//! The pipeline trains a victim classifier and a population of suspects
//! (independent "homologous" models and piracy models derived from the
//! victim), builds high-confidence core points far from the victim's
//! decision boundary, and decides piracy from each suspect's logits on
//! those points.
//!
//! Modules, bottom-up:
//!
//! - [`nn`]: MLP classifiers with parameter and input gradients, SGD training.
//! - [`data`]: synthetic and CIFAR-10 datasets, the 2:2:1 partition.
//! - [`zoo`]: victim, homologous, fine-tuned, pruned, adversarially trained
//!   and extracted models.
//! - [`fingerprint`]: core-point optimization and DeepFool radii.
//! - [`identify`]: L1 / cosine distances, thresholds, clustering.
//! - [`harness`]: end-to-end experiments, MIR/FIR, reports and curves.

// `!(x > 0.0)` style checks reject NaN along with the out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fingerprint;
pub mod harness;
pub mod identify;
pub mod io;
pub mod nn;
pub mod seed;
pub mod stats;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
