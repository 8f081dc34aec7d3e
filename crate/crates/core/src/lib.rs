//! Simulated speculative decoding with a learned controller for draft-tree hyperparameters.

pub mod action;
pub mod bench;
pub mod cache;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod cost;
pub mod engine;
pub mod error;
pub mod features;
pub mod lm;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod tree;
pub mod verify;

pub use error::{Error, Result};
