//! Entropy-masked, frequency-guided masked autoencoder pretraining for
//! infrared imagery.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, a reverse-mode tape, 2D FFTs, gradient checking.
//! * [`imaging`]: grayscale I/O, corpus curation, random crops.
//! * [`masking`]: per-token Shannon entropy and deterministic mask selection.
//! * [`frequency`]: adaptive radial filtering of the centered spectrum.
//! * [`model`]: hierarchical encoder, frequency-guided attention, decoder, checkpoints.
//! * [`training`]: masked MSE, AdamW, warmup + cosine schedule, the pretraining loop.
//! * [`synth`]: deterministic toy corpora for tests and smoke runs.

// `!(x > 0.0)` style checks reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod frequency;
pub mod imaging;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use frequency::{FilterField, RadialFilterParams};
pub use imaging::{CorpusEntry, GrayImage, ResolutionStats};
pub use masking::{MaskSelection, MaskStrategy, TokenGrid};
pub use model::{FeaturePyramid, Model, ModelConfig};
pub use numerics::{ComplexGrid, FilterVariant, Tape, Tensor, Var};
pub use training::{OptimState, TrainConfig};
