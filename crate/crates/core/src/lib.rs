//! Translation simplification by sequence-level distillation.
//!
//! A teacher attentional LSTM translator is trained on reference bitext,
//! re-translates its own training source side with beam search, and a student
//! is trained on the resulting (more literal) targets. The crate also carries
//! the analysis tools used to quantify the simplification: length-difference
//! histograms, crossed-alignment statistics from an EM word aligner, and
//! corpus BLEU.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix it to `f64`, which is what the pipeline uses.

pub mod align;
pub mod beam;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nmt;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph<'p> = tensor::Graph<'p, f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type Gradients = tensor::Gradients<f64>;
pub type Model = nmt::Model<f64>;
pub type ModelParams = nmt::ModelParams<f64>;
pub type EncoderStates = nmt::EncoderStates<f64>;
pub type DecoderState = nmt::DecoderState;
