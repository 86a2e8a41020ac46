//! Experiment harness: trains MNIST classifiers under natural, corruption
//! and PGD training and writes risk estimates as CSV.

pub mod config;
pub mod experiments;
pub mod output;
pub mod spec;

pub use config::ExperimentConfig;
pub use experiments::{
    run_eval, run_matrix, run_sweep, run_train, run_weighted, Cache, CellRow, EstimateRow, MatrixRow, SweepRow,
    WeightedRow,
};
pub use spec::{CellSpec, Split};
