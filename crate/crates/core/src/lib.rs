//! Engine for validated program repairs and concealed hints on learner
//! programs, with synthetic training-data generation and benchmark metrics.

pub mod corpus;
pub mod evalbench;
pub mod gateway;
pub mod pipeline;
pub mod prompts;
pub mod pytokens;
pub mod sandbox;
pub mod synthgen;
pub mod util;
