//! Doubly robust evaluation and learning of sequential decision policies.
//!
//! The crate covers the full pipeline: staged data ([`data`]), a small formula
//! language for model designs ([`design`]), nuisance regressions with
//! cross-fitting ([`nuisance`]), policies and realistic action sets
//! ([`policy`]), value estimation and influence-curve inference
//! ([`evaluation`]), exact policy-tree search ([`tree`]), the policy learners
//! ([`learning`]) and benchmark simulators ([`simulation`]).

pub mod data;
pub mod design;
pub mod error;
pub mod evaluation;
pub mod glm;
pub mod learning;
pub mod nuisance;
pub mod policy;
pub mod seed;
pub mod simulation;
pub mod table;
pub mod tree;

pub use error::{Error, Result};
