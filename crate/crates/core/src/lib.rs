//! Federated-learning simulator for heterogeneous-rank LoRA aggregation.
//!
//! Clients fine-tune low-rank adapters of different ranks on label-skewed
//! shards of MNIST-style data; the server merges them with rank-aware
//! slice averaging, zero-padded averaging, or plain FedAvg over full weights.

pub mod aggregate;
pub mod cli;
pub mod data;
pub mod error;
pub mod federation;
pub mod linalg;
pub mod lora;
pub mod nn;

pub use error::{Error, Result};
