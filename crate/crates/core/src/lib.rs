//! Two-stream speech classifier toolkit: audio I/O and augmentation, MFCC
//! and spectrogram feature pipelines, a small CPU neural-network engine, the
//! fused MFCC/spectrogram network, training and evaluation, and a CLI.

// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio;
pub mod augment;
pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod features;
pub mod metrics;
pub mod mfcc;
pub mod model;
pub mod nn;
pub mod seed;
pub mod spectro;
pub mod train;

pub use audio::AudioClip;
pub use error::{Error, Result};
pub use features::{ClipFeatures, FeatureConfig, FeatureExtractor};
pub use model::{build_model, Architecture, EmoAudioNet, TaskKind};
pub use train::{train_model, LabeledExample, TrainConfig};
