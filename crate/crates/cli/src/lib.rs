//! Library surface of the experiment runner, shared by the `adabatch`
//! binary and the integration tests.

pub mod config;
pub mod experiment;
