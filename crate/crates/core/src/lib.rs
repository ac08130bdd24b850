pub mod datasets;
pub mod generation;
pub mod grounding;
pub mod grpo;
pub mod parse;
pub mod policy;
pub mod schema;
pub mod sqlgate;
pub mod task;
pub mod trajectory;
pub mod validation;
pub mod harness;
