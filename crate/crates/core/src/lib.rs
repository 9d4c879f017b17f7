pub mod agent;
pub mod api;
pub mod bundle;
pub mod cli;
pub mod clock;
pub mod config;
pub mod drift;
pub mod error;
pub mod eval;
pub mod lineage;
pub mod orchestrator;
pub mod prng;
pub mod registry;
pub mod runtime;
pub mod store;
pub mod table;

pub use error::{Error, ErrorCode, Result};
