//! Sequential recommendation with per-period interaction graphs, multi-level
//! long-term sequence encoders and personalized self-augmented denoising.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder_long;
pub mod encoder_short;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pipeline;
pub mod training;

pub use config::{HyperParams, LayerCombine, Variant};
pub use error::{Error, Result};
pub use model::{Embeddings, SelfGnn};
pub use training::{train, Checkpoint, EpochRecord, TrainOutcome, Trainer};
