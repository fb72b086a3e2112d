//! Configuration-driven batch driver around the `scarlab` library.

pub mod commands;
pub mod config;
pub mod csv;
pub mod wf2d;
