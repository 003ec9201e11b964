//! Deterministic federated simulator on synthetic non-IID tasks.

pub mod partition;
pub mod sim;
pub mod task;
pub mod train;

pub use partition::{dirichlet_partition, Partition};
pub use sim::{
    simulate, Checkpoint, ClientSplit, RoundLog, SimConfig, Simulation, Weighting, LAYER_ID,
};
pub use task::{generate_task, Dataset, SyntheticTask, Targets, TaskData, TaskKind, TaskSpec};
pub use train::{local_train, metric, predict, Constraint, LocalTrainConfig, LocalWork, TrainJob};
