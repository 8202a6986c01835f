//! Command-line pipeline around `adaptmeta`: configuration, persistence and
//! the stage commands.

pub mod config;
pub mod pipeline;
pub mod store;
