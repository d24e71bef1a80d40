//! Decentralized meta-learning by diffusion: agents on a graph run MAML
//! adaptation steps locally and average their intermediate launch models with
//! their neighbours (adapt-then-combine). Includes exact oracles on a
//! quadratic task family for checking the convergence theory.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod graph;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod netsim;
pub mod probe;
pub mod report;
pub mod rng;
pub mod tasks;

pub use autodiff::ParamVector;
pub use error::{Error, Result};
