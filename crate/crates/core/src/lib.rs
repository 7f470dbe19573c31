//! Reverse-mode autodiff, a dual-stream video transformer for face forgery
//! detection, and the training and evaluation pipeline around it.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod learn;
pub mod model;
pub mod params;
pub mod tensor;
pub mod verify;

pub use autodiff::{Activation, Tape, Var};
pub use config::{BackboneConfig, ConvStage, ModelConfig, SegmentMode};
pub use error::{Error, Result};
pub use model::Model;
pub use params::{ParamId, ParamStore};
pub use tensor::{Precision, Real, Tensor};
