//! Brand-level ranking with an Attention-GRU over user action sequences.
//!
//! The crate covers the whole pipeline: brand feature engineering ([`features`]),
//! sequence windowing and negative sampling ([`dataset`]), the model zoo with
//! hand-written gradients ([`models`], built on [`nn`]), AdaGrad training and
//! checkpoints ([`train`]), AUC/F1 evaluation ([`eval`]) and a synthetic data
//! generator with a Bayes oracle ([`synth`]).

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod gradcheck;
pub mod models;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod train;

pub use dataset::{ActionType, BrandTable, EncodedInstance, TrainingInstance, Vocabulary};
pub use error::{Error, Result};
pub use eval::{auc, f1_at_threshold, EvalReport};
pub use models::{BrandRepr, Model, ModelConfig, ModelParams, Variant};
pub use nn::{Adagrad, Matrix};
pub use train::{Checkpoint, TrainConfig};
