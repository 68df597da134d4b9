pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod flow;
pub mod image;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod real;
pub mod retouch;
pub mod service;
pub mod style_ops;
pub mod synth;
pub mod trainer;
