//! Federated low-rank adaptation: LoRA adapters, server aggregation rules,
//! the coefficient-weighted aggregation solver, factorization baselines, and a
//! deterministic federated simulator that measures aggregation divergence,
//! communication, and the local/global generalization gap.

pub mod aggregation;
pub mod comm;
pub mod compress;
pub mod config;
pub mod decompose;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod lora;
pub mod matrix;
pub mod metrics;
pub mod rng;
pub mod solver;

pub use aggregation::{
    aggregate, AggregateResult, AggregationContext, ClientUpdate, ClientWeights, LayerAggregate,
    Strategy,
};
pub use comm::{comm_account, CommLedger, Direction, LayerShape, Precision, Traffic};
pub use compress::{compress, CompressionMode, CompressionSpec, Encoded};
pub use config::{parse_config, parse_config_str, Cell, ExperimentConfig, SweepSpec};
pub use decompose::{
    compare_execution, factorize_gram_schmidt, factorize_svd, write_comparison_csv, ComparisonRow,
    FactorizationReport, Method,
};
pub use error::{Error, Result};
pub use experiment::{
    compare_decomposition, emit_plots_data, run_cell, run_experiment, run_sweep, CellSummary,
};
pub use fedsim::{simulate, RoundLog, SimConfig, Simulation, TaskKind, TaskSpec};
pub use lora::{AdapterSet, FrozenLayer, LoraPair};
pub use matrix::DenseMatrix;
pub use metrics::{divergence, DivergenceReport, LayerDivergence};
pub use solver::{CoefficientPair, NaProblem, SolverConfig};
