pub mod annotator;
pub mod consistency;
pub mod corpus;
pub mod cost;
pub mod hashing;
pub mod review;
pub mod synth;
pub mod evaluator;
pub mod trainer;
pub mod pipeline;
pub mod service;
