//! Round orchestration: broadcast, local training, aggregation, metrics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{
    aggregate, aggregate_fedit, AggregateResult, AggregationContext, ClientUpdate, ClientWeights,
    Strategy,
};
use crate::comm::{comm_account, CommLedger, Direction, LayerShape, Precision};
use crate::compress::{compress, CompressionSpec};
use crate::error::{Error, Result};
use crate::fedsim::partition::dirichlet_partition;
use crate::fedsim::task::{generate_task, TaskData, TaskSpec};
use crate::fedsim::train::{local_train, metric, Constraint, LocalTrainConfig, TrainJob};
use crate::lora::{init_lora, kaiming_uniform, AdapterLayer, AdapterSet, FrozenLayer};
use crate::matrix::DenseMatrix;
use crate::metrics::{divergence, DivergenceReport};
use crate::rng::{self, Purpose};
use crate::solver::SolverConfig;

/// Id of the single adapted layer of the simulated model.
pub const LAYER_ID: &str = "linear";

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Proportional to each client's training sample count.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub task: TaskSpec,
    pub clients: usize,
    pub rounds: usize,
    pub local: LocalTrainConfig,
    pub rank: usize,
    pub lora_alpha: f64,
    pub dirichlet_alpha: f64,
    pub solver: SolverConfig,
    pub compression: CompressionSpec,
    pub precision: Precision,
    pub weighting: Weighting,
    /// Share of each client's samples held out as its local test set.
    pub local_test_fraction: f64,
    pub min_client_samples: usize,
    /// STACK: re-initialize the adapters after merging the stacked product.
    pub flora_reinit: bool,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.solver.validate()?;
        self.compression.validate()?;
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.clients == 0 || self.rounds == 0 {
            return bad("clients and rounds must be ≥ 1");
        }
        if self.rank == 0 || self.rank > self.task.input_dim.min(self.task.output_dim) {
            return bad("rank must lie in 1..=min(input_dim, output_dim)");
        }
        if self.lora_alpha.is_nan()
            || self.lora_alpha <= 0.0
            || self.dirichlet_alpha.is_nan()
            || self.dirichlet_alpha <= 0.0
        {
            return bad("lora_alpha and dirichlet_alpha must be > 0");
        }
        if !(self.local_test_fraction > 0.0 && self.local_test_fraction < 1.0) {
            return bad("local_test_fraction must lie in (0, 1)");
        }
        if self.min_client_samples < 2 {
            return bad("min_client_samples must be ≥ 2 so every client has train and test data");
        }
        if self.local.batch_size == 0
            || self.local.learning_rate.is_nan()
            || self.local.learning_rate < 0.0
        {
            return bad("batch_size must be ≥ 1 and learning_rate ≥ 0");
        }
        Ok(())
    }
}

/// One round of one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub strategy: Strategy,
    pub divergence: DivergenceReport,
    /// Mean over clients of the round-start model of the next round,
    /// evaluated on the global test set.
    pub global_metric: f64,
    /// Mean over clients of the end-of-round local model on its local test set.
    pub mean_local_metric: f64,
    /// `mean_local_metric − global_metric`; positive means overfit to local data.
    pub gen_gap: f64,
    pub train_loss: f64,
    pub up_bytes: u64,
    pub down_bytes: u64,
    /// FLORA_NA only: FedIT divergence of the same uploads.
    pub fedit_divergence: Option<f64>,
}

/// Per-client train and local-test sample indices into the training pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SimState {
    round: usize,
    global: AdapterSet,
    initial_a: BTreeMap<String, DenseMatrix>,
    /// FedSA: each client's private `B` per layer.
    client_b: Option<Vec<BTreeMap<String, DenseMatrix>>>,
    ledger: CommLedger,
    logs: Vec<RoundLog>,
}

/// Full resumable state. Random streams are keyed by `(seed, round, client)`,
/// so the round index is the only counter needed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    version: u32,
    strategy: Strategy,
    seed: u64,
    config: SimConfig,
    state: SimState,
}

impl Checkpoint {
    pub fn round(&self) -> usize {
        self.state.round
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        Ok(ck)
    }
}

pub struct Simulation {
    config: SimConfig,
    strategy: Strategy,
    seed: u64,
    data: TaskData,
    split: ClientSplit,
    global_test: Vec<usize>,
    state: SimState,
}

fn split_clients(data: &TaskData, config: &SimConfig, seed: u64) -> Result<ClientSplit> {
    let part = dirichlet_partition(
        &data.train.cluster,
        config.clients,
        config.dirichlet_alpha,
        config.min_client_samples,
        seed,
    )?;
    let mut split = ClientSplit {
        train: Vec::with_capacity(config.clients),
        test: Vec::with_capacity(config.clients),
    };
    for (u, idx) in part.clients.into_iter().enumerate() {
        let mut idx = idx;
        rand::seq::SliceRandom::shuffle(
            idx.as_mut_slice(),
            &mut rng::stream(seed, Purpose::Partition, &[u as u64, 1]),
        );
        let n = idx.len();
        let n_test = ((config.local_test_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut test = idx.split_off(n - n_test);
        idx.sort_unstable();
        test.sort_unstable();
        split.train.push(idx);
        split.test.push(test);
    }
    Ok(split)
}

impl Simulation {
    pub fn new(config: SimConfig, strategy: Strategy, seed: u64) -> Result<Self> {
        config.validate()?;
        let data = generate_task(&config.task, seed)?;
        let split = split_clients(&data, &config, seed)?;
        let (k, d) = (config.task.output_dim, config.task.input_dim);
        let pair = init_lora(k, d, config.rank, config.lora_alpha, seed)?;
        let initial_a = BTreeMap::from([(LAYER_ID.to_string(), pair.a().clone())]);
        let global = AdapterSet::new(vec![AdapterLayer {
            id: LAYER_ID.to_string(),
            frozen: FrozenLayer::new(data.task.base.clone()),
            pair,
        }])?;
        let client_b = (strategy == Strategy::Fedsa).then(|| {
            let zero = BTreeMap::from([(LAYER_ID.to_string(), DenseMatrix::zeros(k, config.rank))]);
            vec![zero; config.clients]
        });
        let global_test = (0..data.test.len()).collect();
        Ok(Self {
            config,
            strategy,
            seed,
            data,
            split,
            global_test,
            state: SimState {
                round: 0,
                global,
                initial_a,
                client_b,
                ledger: CommLedger::new(),
                logs: Vec::new(),
            },
        })
    }

    pub fn resume(checkpoint: Checkpoint) -> Result<Self> {
        let mut sim = Self::new(checkpoint.config, checkpoint.strategy, checkpoint.seed)?;
        sim.state = checkpoint.state;
        Ok(sim)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            strategy: self.strategy,
            seed: self.seed,
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn data(&self) -> &TaskData {
        &self.data
    }

    pub fn split(&self) -> &ClientSplit {
        &self.split
    }

    pub fn round(&self) -> usize {
        self.state.round
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.config.rounds
    }

    pub fn logs(&self) -> &[RoundLog] {
        &self.state.logs
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.state.ledger
    }

    /// Shared model that every client (except FedSA's private `B`) starts
    /// the next round from.
    pub fn global_model(&self) -> &AdapterSet {
        &self.state.global
    }

    /// The model client `u` starts the next round from.
    pub fn client_model(&self, u: usize) -> AdapterSet {
        let mut m = self.state.global.clone();
        if let Some(bs) = &self.state.client_b {
            for layer in m.layers_mut() {
                let a = layer.pair.a().clone();
                layer
                    .pair
                    .set_factors(a, bs[u][&layer.id].clone())
                    .expect("private B matches the layer");
            }
        }
        m
    }

    fn constraint(&self) -> Constraint {
        match self.strategy {
            Strategy::Ffa => Constraint::FreezeA,
            Strategy::Fedsa => Constraint::KeepLocalB,
            _ => Constraint::None,
        }
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        self.state
            .global
            .layers()
            .iter()
            .map(|l| {
                let (k, d) = l.frozen.shape();
                LayerShape { k, d }
            })
            .collect()
    }

    /// Runs the remaining rounds.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_round()?;
        }
        Ok(())
    }

    /// Trains every client from its round-start model, in parallel; results
    /// are in client order with each client's mean training loss.
    fn train_all(&self) -> Result<Vec<(AdapterSet, f64)>> {
        let round = self.state.round;
        let constraint = self.constraint();
        (0..self.config.clients)
            .into_par_iter()
            .map(|u| {
                let mut model = self.client_model(u);
                let job = TrainJob {
                    seed: self.seed,
                    round,
                    client: u,
                };
                let loss = local_train(
                    &self.data.train,
                    &self.split.train[u],
                    &mut model,
                    &self.config.local,
                    constraint,
                    job,
                )?;
                Ok((model, loss))
            })
            .collect()
    }

    fn uploads(&self, trained: &[(AdapterSet, f64)]) -> Vec<ClientUpdate> {
        trained
            .iter()
            .enumerate()
            .map(|(u, (m, _))| ClientUpdate {
                client_id: format!("client{u}"),
                adapters: m
                    .layers()
                    .iter()
                    .map(|l| (l.id.clone(), l.pair.clone()))
                    .collect(),
                sample_count: self.split.train[u].len(),
            })
            .collect()
    }

    /// What the clients would upload at the end of the current round,
    /// without advancing the simulation.
    pub fn client_updates(&self) -> Result<Vec<ClientUpdate>> {
        Ok(self.uploads(&self.train_all()?))
    }

    pub fn client_weights(&self, updates: &[ClientUpdate]) -> Result<ClientWeights> {
        match self.config.weighting {
            Weighting::Uniform => Ok(ClientWeights::uniform(updates.len())),
            Weighting::Samples => ClientWeights::from_sample_counts(updates),
        }
    }

    pub fn run_round(&mut self) -> Result<RoundLog> {
        let round = self.state.round;
        let clients = self.config.clients;
        let trained = self.train_all()?;
        let locals: Vec<f64> = trained
            .par_iter()
            .enumerate()
            .map(|(u, (m, _))| metric(m, &self.data.train, &self.split.test[u]))
            .collect::<Result<_>>()?;

        let updates = self.uploads(&trained);
        let weights = self.client_weights(&updates)?;
        let ctx = AggregationContext {
            frozen_a: Some(&self.state.initial_a),
            solver: self.config.solver.clone(),
        };
        let context = |e: Error| e.context(format!("round {round}"));
        let result = aggregate(self.strategy, &updates, &weights, &ctx).map_err(context)?;
        let report = divergence(&result, true)?;
        let fedit_divergence = if self.strategy == Strategy::FloraNa {
            Some(divergence(&aggregate_fedit(&updates, &weights)?, true)?.aggregate)
        } else {
            None
        };

        let (down_entries, down_bytes) = self.broadcast(&result, &trained, &weights)?;
        let traffic = comm_account(
            self.strategy,
            &self.layer_shapes(),
            &vec![self.config.rank; clients],
        );
        let per_entry = self.config.precision.bytes_per_entry();
        for (u, t) in traffic.iter().enumerate() {
            self.state
                .ledger
                .record(round, u, Direction::Up, t.up, t.up * per_entry);
            self.state
                .ledger
                .record(round, u, Direction::Down, down_entries, down_bytes);
        }

        let global_metric = self.global_metric()?;
        let mean_local_metric = locals.iter().sum::<f64>() / clients as f64;
        let log = RoundLog {
            round,
            strategy: self.strategy,
            divergence: report,
            global_metric,
            mean_local_metric,
            gen_gap: mean_local_metric - global_metric,
            train_loss: trained.iter().map(|(_, l)| l).sum::<f64>() / clients as f64,
            up_bytes: self.state.ledger.round_bytes(round, Direction::Up),
            down_bytes: self.state.ledger.round_bytes(round, Direction::Down),
            fedit_divergence,
        };
        self.state.logs.push(log.clone());
        self.state.round += 1;
        Ok(log)
    }

    /// Applies the server's download to the shared state. Returns the entry
    /// and byte count each client receives.
    fn broadcast(
        &mut self,
        result: &AggregateResult,
        trained: &[(AdapterSet, f64)],
        weights: &ClientWeights,
    ) -> Result<(u64, u64)> {
        let spec = self.config.compression;
        let precision = self.config.precision;
        let mut sent = (0u64, 0u64);
        let mut tx = |m: &DenseMatrix| -> Result<DenseMatrix> {
            let enc = compress(m, &spec, precision)?;
            sent.0 += enc.entries();
            sent.1 += enc.encoded_bytes();
            Ok(enc.decode())
        };
        let missing = |what: &str, id: &str| {
            Error::InvalidSpec(format!("aggregate for layer {id} lacks {what}"))
        };
        let round = self.state.round;
        let (seed, reinit, strategy) = (self.seed, self.config.flora_reinit, self.strategy);
        for layer in self.state.global.layers_mut() {
            let id = layer.id.clone();
            let agg = result
                .layers
                .get(&id)
                .ok_or_else(|| missing("the layer", &id))?;
            let a_bar = || agg.a_bar.as_ref().ok_or_else(|| missing("a_bar", &id));
            let b_bar = || agg.b_bar.as_ref().ok_or_else(|| missing("b_bar", &id));
            let initial_a = self.state.initial_a[&id].clone();
            let (r, d) = initial_a.shape();
            match strategy {
                Strategy::Fedit | Strategy::FloraNa => {
                    let (a, b) = (tx(a_bar()?)?, tx(b_bar()?)?);
                    layer.pair.set_factors(a, b)?;
                }
                Strategy::Ffa => {
                    let b = tx(b_bar()?)?;
                    layer.pair.set_factors(initial_a, b)?;
                }
                Strategy::Fedsa => {
                    let a = tx(a_bar()?)?;
                    let b = layer.pair.b().clone();
                    layer.pair.set_factors(a, b)?;
                    let private = self.state.client_b.as_mut().expect("FedSA keeps private B");
                    for (u, (m, _)) in trained.iter().enumerate() {
                        let local = m.get(&id).expect("same layers").pair.b().clone();
                        private[u].insert(id.clone(), local);
                    }
                }
                Strategy::Fedex => {
                    let (a, b) = (tx(a_bar()?)?, tx(b_bar()?)?);
                    let inc = tx(agg
                        .residual
                        .as_ref()
                        .ok_or_else(|| missing("residual", &id))?)?;
                    layer.frozen.residual.axpy(1.0, &inc)?;
                    layer.pair.set_factors(a, b)?;
                }
                Strategy::Ideal => {
                    let inc = tx(&agg.ideal_delta)?;
                    layer.frozen.residual.axpy(1.0, &inc)?;
                    let zero = DenseMatrix::zeros(layer.pair.out_dim(), r);
                    layer.pair.set_factors(initial_a, zero)?;
                }
                Strategy::Stack => {
                    let (a, b) = (tx(a_bar()?)?, tx(b_bar()?)?);
                    layer.frozen.residual.axpy(agg.scale, &b.matmul(&a)?)?;
                    if reinit {
                        let mut stream =
                            rng::stream(seed, Purpose::Reinit, &[round as u64, rng::label(&id)]);
                        let fresh = kaiming_uniform(r, d, &mut stream);
                        let zero = DenseMatrix::zeros(layer.pair.out_dim(), r);
                        layer.pair.set_factors(fresh, zero)?;
                    } else {
                        // Clients rebuild the weighted means from the stacked blocks
                        // and keep training from them; the residual holds the rest.
                        let mut a_mean = DenseMatrix::zeros(r, d);
                        let mut b_mean = DenseMatrix::zeros(layer.pair.out_dim(), r);
                        for (u, &wu) in weights.as_slice().iter().enumerate() {
                            a_mean.axpy(wu, &a.rows_range(u * r, (u + 1) * r))?;
                            b_mean.axpy(1.0, &b.columns(u * r, (u + 1) * r))?;
                        }
                        layer
                            .frozen
                            .residual
                            .axpy(-agg.scale, &b_mean.matmul(&a_mean)?)?;
                        layer.pair.set_factors(a_mean, b_mean)?;
                    }
                }
            }
        }
        Ok(sent)
    }

    fn global_metric(&self) -> Result<f64> {
        let test = &self.data.test;
        if self.state.client_b.is_some() {
            let per_client: Vec<f64> = (0..self.config.clients)
                .into_par_iter()
                .map(|u| metric(&self.client_model(u), test, &self.global_test))
                .collect::<Result<_>>()?;
            Ok(per_client.iter().sum::<f64>() / per_client.len() as f64)
        } else {
            metric(&self.state.global, test, &self.global_test)
        }
    }
}

/// Runs a full simulation from scratch.
pub fn simulate(config: &SimConfig, strategy: Strategy, seed: u64) -> Result<Simulation> {
    let mut sim = Simulation::new(config.clone(), strategy, seed)?;
    sim.run()?;
    Ok(sim)
}
