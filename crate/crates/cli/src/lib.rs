//! Library side of the `csca` command-line tool.

pub mod bench;
pub mod checkpoint;
pub mod commands;
