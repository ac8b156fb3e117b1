//! Code summarization with fused AST and token representations.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autograd`] provide the
//! numeric core, [`nn`], [`encoders`], [`fusion`] and [`decode`] build the
//! model, and [`trainer`] and [`metrics`] drive training and evaluation.

pub mod align;
pub mod ast;
pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod tensor;
pub mod toy;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
