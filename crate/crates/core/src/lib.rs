pub mod dataset;
pub mod grpo;
pub mod metrics;
pub mod response;
pub mod reward;
pub mod schema;
pub mod sim;
pub mod sql;
