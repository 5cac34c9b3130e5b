pub mod adaptors;
pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod storage;
pub mod tasks;
pub mod tensor;
pub mod vocab;
pub mod workflow;

pub use error::{Error, Result};
