//! Library surface of the experiment runner: configuration, manifests, CSV
//! emission, subcommand implementations, and the sweep experiments. The
//! binary in `main.rs` is a thin argument-parsing layer over this.

pub mod commands;
pub mod config;
pub mod csvout;
pub mod experiments;
pub mod manifest;
