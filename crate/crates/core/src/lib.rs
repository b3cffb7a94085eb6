pub mod backend;
pub mod cfgen;
pub mod domain;
pub mod extraction;
pub mod metrics;
pub mod pipeline;
pub mod reference;
pub mod rng;
