pub mod config;
pub mod continual;
pub mod data;
pub mod federation;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod privacy;
pub mod quadrature;
pub mod rng;
