pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod directions;
pub mod encoder_w;
pub mod error;
pub mod evalsuite;
pub mod feature_editor;
pub mod imageio;
pub mod inverter;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod stylegen;
pub mod toyworld;
pub mod trainer;
pub mod workflow;

pub use error::{CoreError, Result};

/// Element type used for training runs and the command line.
pub type Real = f32;

pub type Generator32 = stylegen::Generator<f32>;
pub type Generator64 = stylegen::Generator<f64>;
pub type Inverter32 = inverter::Inverter<f32>;
pub type Inverter64 = inverter::Inverter<f64>;
pub type FeatureEditor32 = feature_editor::FeatureEditor<f32>;
pub type FeatureEditor64 = feature_editor::FeatureEditor<f64>;
pub type Classifier32 = classifier::Classifier<f32>;
pub type Classifier64 = classifier::Classifier<f64>;
