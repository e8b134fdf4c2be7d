//! Operator surface for hintkit: subcommands and the HTTP service.

pub mod commands;
pub mod config;
pub mod service;
