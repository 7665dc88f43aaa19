//! Memory-efficient bidirectional transformer (MeBT) for video generation
//! over discrete tokens, built end to end at desk scale.

pub mod autograd;
pub mod bench_eval;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod export;
pub mod model;
pub mod nn;
pub mod optim;
pub mod sampler;
pub mod schedules;
pub mod tensor;
pub mod tensor_io;
pub mod tokenizer;
pub mod trainer;

pub use error::{MebtError, Result};
