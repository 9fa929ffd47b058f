pub mod analysis;
pub mod autodiff;
pub mod batcher;
pub mod corpus;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod suite;
mod seed;
pub mod tokenizer;

pub use seed::{derive_seed, rng_for};
