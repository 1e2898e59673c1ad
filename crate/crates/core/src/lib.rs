pub mod cli;
pub mod config;
pub mod dataio;
pub mod densify;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod numerics;
pub mod pipeline;
pub mod synth;
pub mod trainer;
