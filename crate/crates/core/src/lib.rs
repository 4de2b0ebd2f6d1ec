//! Versioned tables, transactional pipeline runs and governance for an
//! agent-first lakehouse, at desk scale.

pub mod catalog;
pub mod engine;
pub mod governance;
pub mod harness;
pub mod healer;
pub mod id;
pub mod lakehouse;
pub mod runner;
pub mod store;
pub mod verify;

pub use lakehouse::{LakeConfig, LakeError, Lakehouse};
