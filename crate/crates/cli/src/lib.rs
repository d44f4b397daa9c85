//! Command-line front end: serve the platform, simulate, benchmark and
//! evaluate.

pub mod bench;
pub mod cli;
pub mod client;
pub mod commands;
pub mod criteria;
pub mod report;
pub mod server;
