pub mod config;
pub mod experiment;
pub mod io;
pub mod synth;
