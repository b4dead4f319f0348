pub mod fem;
pub mod particles;
pub mod reduce;
pub mod integrators;
pub mod bracket;
pub mod scenarios;
pub mod diagnostics;
pub mod config;
pub mod runner;
pub mod bench;
