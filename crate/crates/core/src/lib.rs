pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod deploy;
pub mod error;
pub mod finetune;
pub mod graph;
pub mod mapping;
pub mod model;
pub mod pipeline;
pub mod qparams;
pub mod quant;
pub mod reorder;
pub mod search;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
