//! File formats, the multi-session training service and the command line
//! around [`latentloop_core`].

pub use latentloop_core as core;

pub mod actor;
pub mod checkpoint;
pub mod cli;
pub mod compare;
pub mod logfile;
pub mod runspec;
pub mod server;
pub mod wire;
