//! Self-supervised multimodal opinion summarization.

pub mod autograd;
pub mod corpus;
pub mod decoding;
pub mod evaluation;
pub mod gradcheck;
pub mod image;
pub mod params;
pub mod pipeline;
pub mod seq_model;
pub mod table;
pub mod tensor;
