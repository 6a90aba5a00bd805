//! Multimodal modality-translation toolkit.
//!
//! Encoder-decoder models translate one modality sequence (text, audio or
//! video features, or a time-step concatenation of them) into another; the
//! trained encoder's hidden states are then reused as the input of a
//! sentiment regressor. Hierarchical pipelines chain two translations before
//! regression. The numeric core is generic over [`Scalar`]; the aliases below
//! fix it to `f64`, which is what training and persistence use.

pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod recurrent;
pub mod regression;
pub mod report;
pub mod scalar;
pub mod seq2seq;
pub mod train;

pub use scalar::Scalar;

pub type Array = autodiff::DenseArray<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamStore = autodiff::ParamStore<f64>;
pub type RecurrentStack = recurrent::RecurrentStack;
pub type Encoder = seq2seq::Encoder<f64>;
pub type TranslationModel = seq2seq::TranslationModel<f64>;
pub type EncodedRepresentation = seq2seq::EncodedRepresentation<f64>;
pub type RegressionHead = regression::RegressionHead<f64>;
