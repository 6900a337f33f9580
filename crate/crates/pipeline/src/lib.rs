//! Two-branch crowd-counting network with cross-modal attention fusion,
//! the single-modality and early/late fusion baselines, a procedural
//! paired-modality dataset and a plain SGD trainer.

pub mod config;
pub mod dataset;
pub mod gradsuite;
pub mod network;
pub mod synth;
pub mod train;

pub use config::{FusionMode, PartitionKind, StageConfig};
pub use dataset::{Dataset, DatasetSpec, Sample, Split};
pub use network::Network;
pub use synth::{Illumination, SynthParams};
pub use train::{evaluate, train, train_step, train_with, TrainLog, TrainOptions};
