pub mod agents;
pub mod engine;
pub mod experiment;
pub mod grid;
pub mod navigation;
pub mod particle_filter;
pub mod rng;
pub mod visibility;
