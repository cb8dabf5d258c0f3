//! Instance-specific prompt generation for rehearsal-free continual
//! learning on a frozen toy transformer.
//!
//! A shared codebook of learnable vectors is turned into per-instance
//! prefix prompts ([`pgm`]), reweighted by their correlation with the
//! instance ([`pmm`]), and inserted into the attention layers of a frozen
//! backbone ([`backbone`]). [`trainer`] runs task streams from [`datagen`]
//! and scores them with [`metrics`].

pub mod backbone;
pub mod baselines;
pub mod codebook;
pub mod datagen;
mod error;
pub mod gradcheck;
pub mod init;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod pgm;
pub mod pmm;
pub mod run;
pub mod trainer;

pub use backbone::{Mode, ModelConfig, ToyModel};
pub use codebook::Codebook;
pub use datagen::{StreamKind, StreamSpec, TaskStream};
pub use error::{Error, Result};
pub use metrics::AccuracyMatrix;
pub use run::{RunConfig, RunManifest};
pub use trainer::{TrainConfig, Trainer};
