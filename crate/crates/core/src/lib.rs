//! Graph data model, synthetic data, the graph classifier, the CLEAR
//! generator, search baselines and evaluation metrics.

pub mod baselines;
pub mod classifier;
pub mod clear;
pub mod counterfactual;
pub mod datagen;
pub mod eval;
pub mod error;
pub mod graphs;
pub mod nn;

pub use error::{CoreError, Result};
pub use graphs::{
    load_dataset, save_dataset, Dataset, DatasetHeader, DatasetStats, DegreeStats, Graph, Meta,
    PaddedBatch, PaddedGraph, Partition, Splits,
};
