//! External-memory graph analytics with a sort-reduce update kernel.
//!
//! Vertex-centric algorithms run over graphs that live entirely in secondary
//! storage. Instead of random read-modify-writes to vertex values, each
//! superstep logs partial updates as key-value pairs, then sorts the log by
//! destination vertex while folding an associative reduction into every merge
//! level. Vertex state is reconstructed just-in-time by streaming compositions
//! of the initial values and per-superstep update logs.

pub mod algorithms;
pub mod bloom;
pub mod cli;
pub mod engine;
pub mod error;
pub mod graphfmt;
pub mod sortreduce;
pub mod storage;
pub mod value;
pub mod vsource;

pub use error::{Error, Result};
