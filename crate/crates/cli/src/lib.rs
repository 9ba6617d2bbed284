//! Library surface of the CLI crate: the experiment configuration
//! schema, shared with the binary and its tests.

pub mod config;
