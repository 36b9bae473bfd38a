//! Command-line front end of the `pseudolabel` pipeline and the HTTP service
//! behind the review UI.

pub mod commands;
pub mod config;
pub mod server;
