pub mod capacity;
pub mod error;
pub mod estimation;
pub mod model;
pub mod policies;
pub mod cli;
pub mod report;
pub mod scenario;
pub mod sim;
pub mod svg;
mod simplex;
pub mod workloads;
