//! Library side of the `ctxmt` command: configuration and manifests.

pub mod commands;
pub mod config;
pub mod manifest;
