//! Open-vocabulary camouflaged instance segmentation on frozen diffusion-style
//! features: multi-scale fusion, mask generation, textual-visual aggregation
//! and instance normalisation, with training, evaluation and data tooling.

pub mod backbone;
pub mod cin;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod kmeans;
pub mod losses;
pub mod maskgen;
pub mod model;
pub mod msff;
pub mod nn;
pub mod resample;
pub mod tensor_io;
pub mod train;
pub mod tva;
pub mod viz;
pub mod vocab;
pub mod workflow;

pub use backbone::{Backbone, BackboneConfig, ChannelSpec, FeaturePyramid, Scale};
pub use cin::{CinConfig, CinOutput, SelectedInstance};
pub use config::{Ablation, Config, Precision};
pub use data::{AnnotatedSample, Image, Instance, Mask, Rle};
pub use error::{Error, Result};
pub use eval::{Detection, EvalMode, EvalParams, EvalResult};
pub use losses::{LossBreakdown, MatchAssignment};
pub use maskgen::InstancePredictions;
pub use model::Model;
pub use train::{Checkpoint, LogRecord, TrainOutcome};
pub use vocab::{Category, TextEmbeddingSet, Vocabulary};
