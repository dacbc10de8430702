//! Personalized federated traffic prediction: graph-recurrent predictors,
//! a federated representor that emits prompts, and the training loop that
//! shares only the representor's parameters.

pub mod autodiff;
pub mod config;
pub mod data;
pub mod experiment;
pub mod federation;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod predictor;
pub mod report;
pub mod representor;
pub mod strategy;
pub mod tensor;
