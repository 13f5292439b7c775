pub mod cli;
pub mod data;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;
