//! TOML experiment configs with documented defaults and field-level
//! validation errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::Strategy;
use crate::comm::Precision;
use crate::compress::CompressionSpec;
use crate::error::{Error, Result};
use crate::fedsim::{LocalTrainConfig, LocalWork, SimConfig, TaskKind, TaskSpec, Weighting};
use crate::solver::SolverConfig;

/// Every optional key and its default, as shown by `--help`.
pub const DEFAULTS_HELP: &str = "\
Config keys (TOML). Required: clients, rounds, [task].kind.
  clients                              number of clients U
  rounds                               federated rounds R
  epochs = 1 | local_steps = N         local work per round (pick one; default epochs = 1)
  batch_size = 32
  learning_rate = 0.05
  rank = 8                             LoRA rank r
  lora_alpha = 16.0
  dirichlet_alpha = 0.5
  strategies = all seven               IDEAL FEDIT FFA FEDSA STACK FEDEX FLORA_NA
  seeds = [0]
  output_dir = \"runs\"
  precision = 32                       16, 32 or 64 bits per entry in the ledger
  weighting = \"uniform\"                or \"samples\"
  local_test_fraction = 0.2
  min_client_samples = 4
  flora_reinit = true                  STACK re-initializes adapters every round
  target_metric                        unset; enables rounds_to_target
  checkpoint_every = 0                 rounds between checkpoints; 0 disables
[task]
  kind                                 REGRESSION_TEACHER or CLUSTERED_CLASSIFICATION
  input_dim = 32, output_dim = 10, clusters = 2
  train_samples = 4000, test_samples = 1000, noise_std = 0.0
  shift_rank = 4, shift_scale = 1.0, perturbation_rank = 4, perturbation_scale = 1.0
[solver]
  steps = 100, learning_rate = 0.01, beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8
  init_scale                           unset; starts from the client weights
[compression]
  mode = \"NONE\"                        HALF_PRECISION, QUANT_UNIFORM, SPARSIFY_TOPK
  bits = 8, keep_fraction = 1.0
[sweep]
  dirichlet_alphas = [], clients = []  empty lists keep the base value
";

/// Values swept by the `sweep` subcommand; an empty list keeps the base value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepSpec {
    pub dirichlet_alphas: Vec<f64>,
    pub clients: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub target_metric: Option<f64>,
    pub checkpoint_every: usize,
    pub sweep: SweepSpec,
}

/// One `(strategy, seed)` run of an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub strategy: Strategy,
    pub seed: u64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!(
            "{}_seed{}",
            self.strategy.name().to_ascii_lowercase(),
            self.seed
        )
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    kind: Option<TaskKind>,
    input_dim: Option<i64>,
    output_dim: Option<i64>,
    clusters: Option<i64>,
    train_samples: Option<i64>,
    test_samples: Option<i64>,
    noise_std: Option<f64>,
    shift_rank: Option<i64>,
    shift_scale: Option<f64>,
    perturbation_rank: Option<i64>,
    perturbation_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSweep {
    dirichlet_alphas: Option<Vec<f64>>,
    clients: Option<Vec<i64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    clients: Option<i64>,
    rounds: Option<i64>,
    epochs: Option<i64>,
    local_steps: Option<i64>,
    batch_size: Option<i64>,
    learning_rate: Option<f64>,
    rank: Option<i64>,
    lora_alpha: Option<f64>,
    dirichlet_alpha: Option<f64>,
    strategies: Option<Vec<String>>,
    seeds: Option<Vec<i64>>,
    output_dir: Option<PathBuf>,
    precision: Option<i64>,
    weighting: Option<Weighting>,
    local_test_fraction: Option<f64>,
    min_client_samples: Option<i64>,
    flora_reinit: Option<bool>,
    target_metric: Option<f64>,
    checkpoint_every: Option<i64>,
    task: Option<RawTask>,
    solver: Option<SolverConfig>,
    compression: Option<CompressionSpec>,
    sweep: Option<RawSweep>,
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::ConfigValidation {
        field: field.to_string(),
        message: message.into(),
    }
}

fn count(field: &str, value: Option<i64>, default: i64, min: i64) -> Result<usize> {
    let v = value.unwrap_or(default);
    if v < min {
        return Err(invalid(field, format!("must be ≥ {min}, got {v}")));
    }
    usize::try_from(v).map_err(|_| invalid(field, format!("out of range: {v}")))
}

fn required(field: &str, value: Option<i64>) -> Result<usize> {
    match value {
        Some(_) => count(field, value, 0, 1),
        None => Err(invalid(field, "is required")),
    }
}

fn positive(field: &str, value: Option<f64>, default: f64) -> Result<f64> {
    let v = value.unwrap_or(default);
    if !(v > 0.0 && v.is_finite()) {
        return Err(invalid(
            field,
            format!("must be positive and finite, got {v}"),
        ));
    }
    Ok(v)
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RawTask {
    fn resolve(self) -> Result<TaskSpec> {
        let kind = self
            .kind
            .ok_or_else(|| invalid("task.kind", "is required"))?;
        let spec = TaskSpec {
            kind,
            input_dim: count("task.input_dim", self.input_dim, 32, 1)?,
            output_dim: count("task.output_dim", self.output_dim, 10, 1)?,
            clusters: count("task.clusters", self.clusters, 2, 1)?,
            train_samples: count("task.train_samples", self.train_samples, 4000, 1)?,
            test_samples: count("task.test_samples", self.test_samples, 1000, 1)?,
            noise_std: self.noise_std.unwrap_or(0.0),
            shift_rank: count("task.shift_rank", self.shift_rank, 4, 0)?,
            shift_scale: self.shift_scale.unwrap_or(1.0),
            perturbation_rank: count("task.perturbation_rank", self.perturbation_rank, 4, 0)?,
            perturbation_scale: self.perturbation_scale.unwrap_or(1.0),
        };
        if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
            return Err(invalid("task.noise_std", "must be finite and ≥ 0"));
        }
        spec.validate()
            .map_err(|e| invalid("task", e.to_string()))?;
        Ok(spec)
    }
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let task = self
            .task
            .ok_or_else(|| invalid("task", "is required"))?
            .resolve()?;
        let clients = required("clients", self.clients)?;
        let rounds = required("rounds", self.rounds)?;
        let work = match (self.epochs, self.local_steps) {
            (Some(_), Some(_)) => {
                return Err(invalid(
                    "local_steps",
                    "set either epochs or local_steps, not both",
                ))
            }
            (None, Some(_)) => LocalWork::Steps(count("local_steps", self.local_steps, 0, 1)?),
            (_, None) => LocalWork::Epochs(count("epochs", self.epochs, 1, 1)?),
        };
        let learning_rate = self.learning_rate.unwrap_or(0.05);
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(invalid(
                "learning_rate",
                format!("must be finite and ≥ 0, got {learning_rate}"),
            ));
        }
        let local = LocalTrainConfig {
            work,
            batch_size: count("batch_size", self.batch_size, 32, 1)?,
            learning_rate,
        };
        let rank = count("rank", self.rank, 8, 1)?;
        let max_rank = task.input_dim.min(task.output_dim);
        if rank > max_rank {
            return Err(invalid(
                "rank",
                format!("must be ≤ min(input_dim, output_dim) = {max_rank}, got {rank}"),
            ));
        }
        let precision = match self.precision {
            None => Precision::default(),
            Some(bits) => u32::try_from(bits)
                .ok()
                .and_then(|b| Precision::try_from(b).ok())
                .ok_or_else(|| invalid("precision", format!("must be 16, 32 or 64, got {bits}")))?,
        };
        let local_test_fraction = self.local_test_fraction.unwrap_or(0.2);
        if !(local_test_fraction > 0.0 && local_test_fraction < 1.0) {
            return Err(invalid("local_test_fraction", "must lie in (0, 1)"));
        }
        let min_client_samples = count("min_client_samples", self.min_client_samples, 4, 2)?;
        if task.train_samples < clients * min_client_samples {
            return Err(invalid(
                "task.train_samples",
                format!(
                    "{} samples cannot give {clients} clients {min_client_samples} each",
                    task.train_samples
                ),
            ));
        }
        let solver = self.solver.unwrap_or_default();
        solver.validate()?;
        let compression = self.compression.unwrap_or_default();
        compression
            .validate()
            .map_err(|e| invalid("compression", e.to_string()))?;

        let strategies = match self.strategies {
            None => Strategy::ALL.to_vec(),
            Some(names) => {
                let mut out = Vec::with_capacity(names.len());
                for name in &names {
                    let s: Strategy = name
                        .parse()
                        .map_err(|e: Error| invalid("strategies", e.to_string()))?;
                    if out.contains(&s) {
                        return Err(invalid("strategies", format!("{s} listed twice")));
                    }
                    out.push(s);
                }
                out
            }
        };
        if strategies.is_empty() {
            return Err(invalid("strategies", "must not be empty"));
        }
        let seeds = match self.seeds {
            None => vec![0],
            Some(seeds) => {
                let mut out = Vec::with_capacity(seeds.len());
                for s in seeds {
                    let s = u64::try_from(s)
                        .map_err(|_| invalid("seeds", format!("must be ≥ 0, got {s}")))?;
                    if out.contains(&s) {
                        return Err(invalid("seeds", format!("seed {s} listed twice")));
                    }
                    out.push(s);
                }
                out
            }
        };
        if seeds.is_empty() {
            return Err(invalid("seeds", "must not be empty"));
        }
        if let Some(t) = self.target_metric {
            if !t.is_finite() {
                return Err(invalid("target_metric", "must be finite"));
            }
        }
        let raw_sweep = self.sweep.unwrap_or_default();
        let dirichlet_alphas = raw_sweep.dirichlet_alphas.unwrap_or_default();
        if let Some(a) = dirichlet_alphas
            .iter()
            .find(|a| !(**a > 0.0 && a.is_finite()))
        {
            return Err(invalid(
                "sweep.dirichlet_alphas",
                format!("must be positive and finite, got {a}"),
            ));
        }
        let sweep_clients = raw_sweep
            .clients
            .unwrap_or_default()
            .into_iter()
            .map(|u| count("sweep.clients", Some(u), 0, 1))
            .collect::<Result<Vec<_>>>()?;

        let sim = SimConfig {
            task,
            clients,
            rounds,
            local,
            rank,
            lora_alpha: positive("lora_alpha", self.lora_alpha, 16.0)?,
            dirichlet_alpha: positive("dirichlet_alpha", self.dirichlet_alpha, 0.5)?,
            solver,
            compression,
            precision,
            weighting: self.weighting.unwrap_or_default(),
            local_test_fraction,
            min_client_samples,
            flora_reinit: self.flora_reinit.unwrap_or(true),
        };
        sim.validate()
            .map_err(|e| invalid("config", e.to_string()))?;
        Ok(ExperimentConfig {
            sim,
            strategies,
            seeds,
            output_dir: self.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            target_metric: self.target_metric,
            checkpoint_every: count("checkpoint_every", self.checkpoint_every, 0, 0)?,
            sweep: SweepSpec {
                dirichlet_alphas,
                clients: sweep_clients,
            },
        })
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    raw.resolve()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::from(e).context(path.display().to_string()))?;
    parse_config_str(&text)
}

fn signed(v: usize) -> i64 {
    i64::try_from(v).unwrap_or(i64::MAX)
}

impl ExperimentConfig {
    /// All `(strategy, seed)` cells in strategy-major order.
    pub fn cells(&self) -> Vec<Cell> {
        self.strategies
            .iter()
            .flat_map(|&strategy| self.seeds.iter().map(move |&seed| Cell { strategy, seed }))
            .collect()
    }

    /// Fully resolved config as TOML; parsing it gives back `self`.
    pub fn to_toml(&self) -> Result<String> {
        let s = &self.sim;
        let t = &s.task;
        let (epochs, local_steps) = match s.local.work {
            LocalWork::Epochs(n) => (Some(signed(n)), None),
            LocalWork::Steps(n) => (None, Some(signed(n))),
        };
        let raw = RawConfig {
            clients: Some(signed(s.clients)),
            rounds: Some(signed(s.rounds)),
            epochs,
            local_steps,
            batch_size: Some(signed(s.local.batch_size)),
            learning_rate: Some(s.local.learning_rate),
            rank: Some(signed(s.rank)),
            lora_alpha: Some(s.lora_alpha),
            dirichlet_alpha: Some(s.dirichlet_alpha),
            strategies: Some(
                self.strategies
                    .iter()
                    .map(|st| st.name().to_string())
                    .collect(),
            ),
            seeds: Some(
                self.seeds
                    .iter()
                    .map(|&x| i64::try_from(x).unwrap_or(i64::MAX))
                    .collect(),
            ),
            output_dir: Some(self.output_dir.clone()),
            precision: Some(i64::from(s.precision.bits())),
            weighting: Some(s.weighting),
            local_test_fraction: Some(s.local_test_fraction),
            min_client_samples: Some(signed(s.min_client_samples)),
            flora_reinit: Some(s.flora_reinit),
            target_metric: self.target_metric,
            checkpoint_every: Some(signed(self.checkpoint_every)),
            task: Some(RawTask {
                kind: Some(t.kind),
                input_dim: Some(signed(t.input_dim)),
                output_dim: Some(signed(t.output_dim)),
                clusters: Some(signed(t.clusters)),
                train_samples: Some(signed(t.train_samples)),
                test_samples: Some(signed(t.test_samples)),
                noise_std: Some(t.noise_std),
                shift_rank: Some(signed(t.shift_rank)),
                shift_scale: Some(t.shift_scale),
                perturbation_rank: Some(signed(t.perturbation_rank)),
                perturbation_scale: Some(t.perturbation_scale),
            }),
            solver: Some(s.solver.clone()),
            compression: Some(s.compression),
            sweep: Some(RawSweep {
                dirichlet_alphas: Some(self.sweep.dirichlet_alphas.clone()),
                clients: Some(self.sweep.clients.iter().map(|&u| signed(u)).collect()),
            }),
        };
        toml::to_string(&raw).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Grid of `(clients, dirichlet_alpha)` points visited by a sweep.
    pub fn sweep_points(&self) -> Vec<(usize, f64)> {
        let clients = if self.sweep.clients.is_empty() {
            vec![self.sim.clients]
        } else {
            self.sweep.clients.clone()
        };
        let alphas = if self.sweep.dirichlet_alphas.is_empty() {
            vec![self.sim.dirichlet_alpha]
        } else {
            self.sweep.dirichlet_alphas.clone()
        };
        clients
            .iter()
            .flat_map(|&u| alphas.iter().map(move |&a| (u, a)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::aggregation::Strategy;
    use crate::compress::CompressionMode;

    const MINIMAL: &str = "clients = 10\nrounds = 5\n[task]\nkind = \"CLUSTERED_CLASSIFICATION\"\n";

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = parse_config_str(MINIMAL).unwrap();
        assert_eq!(c.sim.clients, 10);
        assert_eq!(c.sim.rounds, 5);
        assert_eq!(c.sim.local.work, LocalWork::Epochs(1));
        assert_eq!(c.sim.local.batch_size, 32);
        assert_eq!(c.sim.local.learning_rate, 0.05);
        assert_eq!(c.sim.rank, 8);
        assert_eq!(c.sim.lora_alpha, 16.0);
        assert_eq!(c.sim.dirichlet_alpha, 0.5);
        assert_eq!(c.strategies, Strategy::ALL.to_vec());
        assert_eq!(c.seeds, vec![0]);
        assert_eq!(c.output_dir, PathBuf::from("runs"));
        assert_eq!(c.sim.precision, Precision::F32);
        assert_eq!(c.sim.weighting, Weighting::Uniform);
        assert_eq!(c.sim.local_test_fraction, 0.2);
        assert_eq!(c.sim.min_client_samples, 4);
        assert!(c.sim.flora_reinit);
        assert_eq!(c.target_metric, None);
        assert_eq!(c.checkpoint_every, 0);
        assert_eq!(c.sim.solver, SolverConfig::default());
        assert_eq!(c.sim.compression.mode, CompressionMode::None);
        assert_eq!(
            (
                c.sim.task.input_dim,
                c.sim.task.output_dim,
                c.sim.task.train_samples,
                c.sim.task.test_samples
            ),
            (32, 10, 4000, 1000)
        );
        assert_eq!(c.sweep, SweepSpec::default());
        assert_eq!(c.cells().len(), 7);
    }

    #[test]
    fn echo_round_trips() {
        let c = parse_config_str(MINIMAL).unwrap();
        let text = c.to_toml().unwrap();
        assert_eq!(parse_config_str(&text).unwrap(), c);
        assert!(text.contains("batch_size = 32"));
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = parse_config_str("clients = 2\nrounds = 1\nbogus = 3\n").unwrap_err();
        match err {
            Error::ConfigParse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"), "{message}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_names_the_field() {
        let field =
            |extra: &str| match parse_config_str(&format!("{extra}\n{MINIMAL}")).unwrap_err() {
                Error::ConfigValidation { field, .. } => field,
                other => panic!("{other}"),
            };
        assert_eq!(field("rank = -1"), "rank");
        assert_eq!(field("rank = 64"), "rank");
        assert_eq!(field("epochs = 2\nlocal_steps = 3"), "local_steps");
        assert_eq!(field("precision = 8"), "precision");
        assert_eq!(field("strategies = [\"FEDAVG\"]"), "strategies");
        assert_eq!(field("seeds = [-1]"), "seeds");
        assert_eq!(field("dirichlet_alpha = 0.0"), "dirichlet_alpha");
        assert_eq!(field("min_client_samples = 1000"), "task.train_samples");
        let missing =
            parse_config_str("clients = 2\n[task]\nkind = \"REGRESSION_TEACHER\"\n").unwrap_err();
        assert!(matches!(missing, Error::ConfigValidation { ref field, .. } if field == "rounds"));
    }

    #[test]
    fn cells_and_sweep_points() {
        let c = parse_config_str(&format!(
            "strategies = [\"fedit\", \"FLORA_NA\"]\nseeds = [3, 1]\n{MINIMAL}[sweep]\ndirichlet_alphas = [0.1, 1.0]\nclients = [4, 8]\n"
        ))
        .unwrap();
        let cells = c.cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].dir_name(), "fedit_seed3");
        assert_eq!(cells[3].dir_name(), "flora_na_seed1");
        assert_eq!(
            c.sweep_points(),
            vec![(4, 0.1), (4, 1.0), (8, 0.1), (8, 1.0)]
        );
    }

    proptest! {
        #[test]
        fn resolved_configs_round_trip(
            clients in 1usize..20,
            rounds in 1usize..50,
            steps in proptest::option::of(1usize..40),
            rank in 1usize..10,
            alpha in 0.01f64..100.0,
            lr in 0.0f64..1.0,
            bits in prop_oneof![Just(16i64), Just(32), Just(64)],
        ) {
            let work = steps.map_or(String::new(), |s| format!("local_steps = {s}\n"));
            let text = format!(
                "clients = {clients}\nrounds = {rounds}\n{work}rank = {rank}\ndirichlet_alpha = {alpha}\n\
                 learning_rate = {lr}\nprecision = {bits}\n[task]\nkind = \"REGRESSION_TEACHER\"\n"
            );
            let c = parse_config_str(&text).unwrap();
            prop_assert_eq!(parse_config_str(&c.to_toml().unwrap()).unwrap(), c);
        }
    }
}
