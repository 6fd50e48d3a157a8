pub mod engine;
pub mod topology;
pub mod world;

pub use world::{run, RunOutput, World};
