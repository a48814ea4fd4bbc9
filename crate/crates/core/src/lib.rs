//! Explainable knowledge-graph agent for text adventure games.
//!
//! The crate bundles a small deterministic game engine, a template action
//! grammar, a knowledge-graph belief state, a reverse-mode autodiff core,
//! the attention policy with its immediate explanations, an A2C trainer,
//! trajectory storage, and the trajectory-level explanation pipeline.

pub mod defn;
pub mod engine;
pub mod grammar;
pub mod kgstate;
pub mod autodiff;
pub mod policy;
pub mod trainer;
pub mod trajstore;
pub mod temporal;
