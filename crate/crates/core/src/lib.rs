//! Energy-aware RAN control workbench.
//!
//! A slot-level cell simulator, a small reverse-mode autodiff library, a
//! Transformer set-encoder over per-UE KPIs, and a dual-actor/dual-critic PPO
//! agent whose critics are fused by a bipartite graph-attention layer. The
//! agent jointly picks a per-frame RU sleep pattern and per-slice PRB shares.

pub mod agent;
pub mod baselines;
pub mod config;
pub mod e2link;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod sim;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
