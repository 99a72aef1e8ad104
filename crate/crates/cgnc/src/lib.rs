pub mod conditioning;
pub mod data;
pub mod checkpoint;
pub mod classifier;
pub mod generator;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod rng;
pub mod training;
