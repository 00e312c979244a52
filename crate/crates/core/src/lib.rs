//! Multi-view action progress prediction.
//!
//! The pipeline: per-frame visual backbone, spatial pyramid pooling, per-view embedding,
//! concatenation fusion and a stacked LSTM that predicts progress causally, frame by frame.

pub mod backbone;
pub mod dataset;
pub mod episode;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod numcore;
pub mod synthgen;
pub mod temporal;
pub mod training;
pub mod view;

pub use backbone::{BackboneConfig, BackboneKind};
pub use episode::{Episode, Image, ProgressLabels, SensorTrace};
pub use error::{Error, Result};
pub use fusion::Mode;
pub use temporal::{ModelConfig, ProgressModel, RecurrentState};
pub use training::{LabeledEpisode, TrainConfig};
pub use view::{View, ViewMask};
