//! Neural Assistant: a Transformer dialog model that attends jointly over
//! the conversation history and a knowledge base, with training,
//! decoding, evaluation, and an HTTP session service.

pub mod checkpoint;
pub mod cli;
pub mod decode;
pub mod error;
pub mod eval;
pub mod kb;
pub mod model;
pub mod server;
pub mod synth;
pub mod tensor;
pub mod text;
pub mod train;

pub use error::{Error, Result};
