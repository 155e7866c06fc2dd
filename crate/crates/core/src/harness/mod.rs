//! Downstream classifier experiment, experiment configuration, and the
//! pipeline shared by the command-line tool and end-to-end tests.

mod classifier;
mod config;
pub mod pipeline;
mod triplet;

pub use classifier::{evaluate, train_classifier, Classifier, ClassifierConfig, ClassifierReport, TrainSource};
pub use config::{
    AutoencoderSection, DatasetConfig, DenoiserSection, ExperimentConfig, ExtractorKind, MetricConfig, MetricKind,
    ModelConfig, ModelKind, CONFIG_VERSION,
};
pub use triplet::{run_triplet, TripletReport};
