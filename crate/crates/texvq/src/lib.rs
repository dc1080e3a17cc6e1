//! Std companion of `texvq-core`: binary containers, datasets on disk, run
//! directories, the matching benchmark, SVG charts and the CLI.

pub mod bench;
pub mod cli;
pub mod config;
pub mod data;
pub mod formats;
pub mod pipeline;
pub mod plot;
pub mod run;
