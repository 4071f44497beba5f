pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod policy;
pub mod prm;
pub mod rng;
pub mod train;
pub mod world;
