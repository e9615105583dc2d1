//! Text- and audio-conditioned keypoint sequence generation with a
//! step-conditioned refinement sampler, tri-modal contrastive binding and
//! embedding-consistency training, on a procedurally generated corpus.

pub mod backtranslate;
pub mod binding;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod ecl;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod render;
pub mod seqfile;
pub mod sign;
pub mod train;

pub use config::Config;
pub use error::{Result, SignError};
pub use model::{GenerationConfig, Modality, SignModel};
pub use sign::{AudioFeatureSeq, Embedding, SignSequence, TextTokens};
