//! Core library for an aggregation-free, model-heterogeneous federated
//! learning simulator built around multi-dimensional similarity knowledge
//! distillation.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod protocol;
pub mod runner;
pub mod seeding;
pub mod skd;
