//! Zero-shot music tagging in a joint audio/word embedding space.
//!
//! Audio goes through a log-mel front end and a small CNN; tag words go
//! through a pre-trained word-vector table and a learned linear projection.
//! Both land on the unit sphere of the same space, trained with a triplet
//! hinge loss, so unseen tags can be scored by cosine similarity.

pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod diff;
pub mod dsp;
pub mod encoder;
pub mod eval;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod scalar;
pub mod trainer;
pub mod words;

pub use scalar::{DType, Scalar};

pub type Signal32 = dsp::PcmSignal<f32>;
pub type Signal64 = dsp::PcmSignal<f64>;
pub type Mel32 = dsp::MelSpectrogram<f32>;
pub type Mel64 = dsp::MelSpectrogram<f64>;
pub type Frontend32 = dsp::MelFrontend<f32>;
pub type Frontend64 = dsp::MelFrontend<f64>;
pub type WordTable32 = words::WordVectorTable<f32>;
pub type WordTable64 = words::WordVectorTable<f64>;
pub type Point32 = encoder::SemanticPoint<f32>;
pub type Point64 = encoder::SemanticPoint<f64>;
pub type Store32 = diff::ParameterStore<f32>;
pub type Store64 = diff::ParameterStore<f64>;
pub type Checkpoint32 = checkpoint::ModelCheckpoint<f32>;
pub type Checkpoint64 = checkpoint::ModelCheckpoint<f64>;
pub type Model32 = inference::ZeroShotModel<f32>;
pub type Model64 = inference::ZeroShotModel<f64>;
