//! Two-stage scene graph generation with relation-regularised encoders.
//!
//! Stage 1 encodes ordered object features with a highway LSTM stack, scores
//! relation existence between every object pair, convolves over the
//! resulting affinity graph and decodes refined labels. Stage 2 re-encodes
//! with the label embeddings and scores every ordered pair against every
//! predicate. Everything runs on a small reverse-mode tape in `f64`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod freq;
pub mod hlstm;
pub mod io;
pub mod model;
pub mod nn;
pub mod refiner;
pub mod relation;
pub mod scene;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{RunConfig, Task};
pub use error::{Error, Result};
pub use model::{Model, Prediction};
