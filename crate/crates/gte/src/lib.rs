//! File formats, configuration, the Monte Carlo study runner and the
//! invariant suite behind the `gte` command-line tool.

pub mod checks;
pub mod config;
pub mod io;
pub mod study;
