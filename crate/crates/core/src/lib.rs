//! Text-based cross-domain sequential recommendation with domain-shared and
//! domain-specific prompts, co-attention prompt encoding and a two-stage
//! pre-train / prompt-tune schedule.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod prompt;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
