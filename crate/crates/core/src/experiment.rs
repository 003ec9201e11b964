//! Experiment execution: one simulation per `(strategy, seed)` cell, CSV and
//! JSON artifacts per cell, parameter sweeps, and plot-ready summaries.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::Strategy;
use crate::config::{Cell, ExperimentConfig};
use crate::decompose::{compare_execution, ComparisonRow};
use crate::error::{Error, Result};
use crate::fedsim::{Checkpoint, RoundLog, Simulation, LAYER_ID};
use crate::solver::NaProblem;

/// Rounds averaged for the tail generalization gap.
pub const GAP_TAIL_ROUNDS: usize = 10;

pub const ROUNDS_HEADER: [&str; 12] = [
    "round",
    "strategy",
    "seed",
    "normalized_divergence",
    "raw_gap",
    "global_metric",
    "mean_local_metric",
    "gen_gap",
    "train_loss",
    "up_bytes",
    "down_bytes",
    "fedit_divergence",
];
pub const DIVERGENCE_HEADER: [&str; 3] = ["round", "strategy", "normalized_divergence"];
pub const DIVERGENCE_LAYERS_HEADER: [&str; 6] = [
    "round",
    "strategy",
    "layer",
    "normalized",
    "raw",
    "raw_squared",
];
pub const GENGAP_HEADER: [&str; 5] = [
    "round",
    "strategy",
    "mean_local_metric",
    "global_metric",
    "gen_gap",
];
pub const CELLS_HEADER: [&str; 9] = [
    "strategy",
    "seed",
    "clients",
    "dirichlet_alpha",
    "final_global_metric",
    "final_gen_gap",
    "tail_gen_gap",
    "final_divergence",
    "total_down_bytes",
];
pub const PLOT_DIVERGENCE_HEADER: [&str; 6] = [
    "strategy",
    "clients",
    "dirichlet_alpha",
    "round",
    "median_normalized_divergence",
    "seeds",
];
pub const PLOT_GENGAP_HEADER: [&str; 8] = [
    "strategy",
    "clients",
    "dirichlet_alpha",
    "round",
    "median_gen_gap",
    "median_mean_local_metric",
    "median_global_metric",
    "seeds",
];
pub const PLOT_FINAL_HEADER: [&str; 6] = [
    "strategy",
    "clients",
    "dirichlet_alpha",
    "median_final_global_metric",
    "median_tail_gen_gap",
    "seeds",
];

/// Final numbers of one cell, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: Strategy,
    pub seed: u64,
    pub clients: usize,
    pub dirichlet_alpha: f64,
    pub rounds: usize,
    pub final_global_metric: f64,
    pub best_global_metric: f64,
    pub final_mean_local_metric: f64,
    pub final_gen_gap: f64,
    /// Mean generalization gap over the last [`GAP_TAIL_ROUNDS`] rounds.
    pub tail_gen_gap: f64,
    pub final_divergence: f64,
    pub max_divergence: f64,
    pub total_up_bytes: u64,
    pub total_down_bytes: u64,
    pub target_metric: Option<f64>,
    /// Rounds completed when the global metric first reached the target.
    pub rounds_to_target: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    started_unix_s: f64,
    finished_unix_s: f64,
    wall_clock_s: f64,
    resumed_from_round: Option<usize>,
    version: String,
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn summarize(
    logs: &[RoundLog],
    cell: Cell,
    config: &ExperimentConfig,
    up: u64,
    down: u64,
) -> CellSummary {
    let last = logs.last().expect("a finished run has at least one round");
    let tail = &logs[logs.len().saturating_sub(GAP_TAIL_ROUNDS)..];
    CellSummary {
        strategy: cell.strategy,
        seed: cell.seed,
        clients: config.sim.clients,
        dirichlet_alpha: config.sim.dirichlet_alpha,
        rounds: logs.len(),
        final_global_metric: last.global_metric,
        best_global_metric: logs
            .iter()
            .map(|l| l.global_metric)
            .fold(f64::NEG_INFINITY, f64::max),
        final_mean_local_metric: last.mean_local_metric,
        final_gen_gap: last.gen_gap,
        tail_gen_gap: tail.iter().map(|l| l.gen_gap).sum::<f64>() / tail.len() as f64,
        final_divergence: last.divergence.aggregate,
        max_divergence: logs
            .iter()
            .map(|l| l.divergence.aggregate)
            .fold(0.0, f64::max),
        total_up_bytes: up,
        total_down_bytes: down,
        target_metric: config.target_metric,
        rounds_to_target: config.target_metric.and_then(|t| {
            logs.iter()
                .find(|l| l.global_metric >= t)
                .map(|l| l.round + 1)
        }),
    }
}

fn write_artifacts(dir: &Path, sim: &Simulation, cell: Cell) -> Result<()> {
    let logs = sim.logs();
    let name = cell.strategy.name();
    write_csv(
        &dir.join("rounds.csv"),
        &ROUNDS_HEADER,
        logs.iter().map(|l| {
            vec![
                l.round.to_string(),
                name.to_string(),
                cell.seed.to_string(),
                l.divergence.aggregate.to_string(),
                l.divergence.raw_gap.to_string(),
                l.global_metric.to_string(),
                l.mean_local_metric.to_string(),
                l.gen_gap.to_string(),
                l.train_loss.to_string(),
                l.up_bytes.to_string(),
                l.down_bytes.to_string(),
                opt(l.fedit_divergence),
            ]
        }),
    )?;
    write_csv(
        &dir.join("divergence.csv"),
        &DIVERGENCE_HEADER,
        logs.iter().map(|l| {
            vec![
                l.round.to_string(),
                name.to_string(),
                l.divergence.aggregate.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("divergence_layers.csv"),
        &DIVERGENCE_LAYERS_HEADER,
        logs.iter().flat_map(|l| {
            l.divergence.layers.iter().map(move |(id, d)| {
                vec![
                    l.round.to_string(),
                    name.to_string(),
                    id.clone(),
                    opt(d.normalized),
                    d.raw.to_string(),
                    d.raw_squared.to_string(),
                ]
            })
        }),
    )?;
    write_csv(
        &dir.join("gengap.csv"),
        &GENGAP_HEADER,
        logs.iter().map(|l| {
            vec![
                l.round.to_string(),
                name.to_string(),
                l.mean_local_metric.to_string(),
                l.global_metric.to_string(),
                l.gen_gap.to_string(),
            ]
        }),
    )?;
    sim.ledger()
        .write_csv(BufWriter::new(fs::File::create(dir.join("comm.csv"))?))?;
    let mut jsonl = BufWriter::new(fs::File::create(dir.join("rounds.jsonl"))?);
    for l in logs {
        serde_json::to_writer(&mut jsonl, l)?;
        jsonl.write_all(b"\n")?;
    }
    jsonl.flush()?;
    Ok(())
}

/// Runs one cell to completion inside `dir`, resuming from `checkpoint.json`
/// when checkpointing is enabled and a matching checkpoint exists.
pub fn run_cell(config: &ExperimentConfig, cell: Cell, dir: &Path) -> Result<CellSummary> {
    let started = unix_now();
    let clock = Instant::now();
    fs::create_dir_all(dir)?;
    let ck_path = dir.join("checkpoint.json");
    let resumable = (config.checkpoint_every > 0 && ck_path.exists())
        .then(|| Checkpoint::load(&ck_path))
        .transpose()?
        .filter(|ck| {
            ck.strategy() == cell.strategy && ck.seed() == cell.seed && ck.config() == &config.sim
        });
    let resumed_from_round = resumable.as_ref().map(Checkpoint::round);
    let mut sim = match resumable {
        Some(ck) => Simulation::resume(ck)?,
        None => Simulation::new(config.sim.clone(), cell.strategy, cell.seed)?,
    };
    while !sim.is_finished() {
        sim.run_round()?;
        if config.checkpoint_every > 0
            && (sim.round() % config.checkpoint_every == 0 || sim.is_finished())
        {
            sim.checkpoint().save(&ck_path)?;
        }
    }
    write_artifacts(dir, &sim, cell)?;
    let ledger = sim.ledger();
    let summary = summarize(
        sim.logs(),
        cell,
        config,
        ledger.total_bytes(crate::comm::Direction::Up),
        ledger.total_bytes(crate::comm::Direction::Down),
    );
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let meta = Meta {
        started_unix_s: started,
        finished_unix_s: unix_now(),
        wall_clock_s: clock.elapsed().as_secs_f64(),
        resumed_from_round,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(summary)
}

/// Runs every `(strategy, seed)` cell in parallel, each in its own
/// subdirectory of `out`, and writes the resolved config and a cell table.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Vec<CellSummary>> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;
    let summaries = config
        .cells()
        .par_iter()
        .map(|&cell| {
            run_cell(config, cell, &out.join(cell.dir_name()))
                .map_err(|e| e.context(format!("strategy {} seed {}", cell.strategy, cell.seed)))
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(
        &out.join("cells.csv"),
        &CELLS_HEADER,
        summaries.iter().map(|s| {
            vec![
                s.strategy.name().to_string(),
                s.seed.to_string(),
                s.clients.to_string(),
                s.dirichlet_alpha.to_string(),
                s.final_global_metric.to_string(),
                s.final_gen_gap.to_string(),
                s.tail_gen_gap.to_string(),
                s.final_divergence.to_string(),
                s.total_down_bytes.to_string(),
            ]
        }),
    )?;
    Ok(summaries)
}

pub fn sweep_dir_name(clients: usize, alpha: f64) -> String {
    format!("u{clients}_alpha{alpha}")
}

/// Runs the full experiment at every sweep point, one subdirectory each.
pub fn run_sweep(config: &ExperimentConfig, out: &Path) -> Result<Vec<CellSummary>> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), config.to_toml()?)?;
    let mut all = Vec::new();
    for (clients, alpha) in config.sweep_points() {
        let mut point = config.clone();
        point.sim.clients = clients;
        point.sim.dirichlet_alpha = alpha;
        point.sweep = Default::default();
        if point.sim.task.train_samples < clients * point.sim.min_client_samples {
            return Err(Error::ConfigValidation {
                field: "sweep.clients".into(),
                message: format!(
                    "{clients} clients need more than {} training samples",
                    point.sim.task.train_samples
                ),
            });
        }
        let summaries = run_experiment(&point, &out.join(sweep_dir_name(clients, alpha)))
            .map_err(|e| e.context(format!("sweep point U={clients} alpha={alpha}")))?;
        all.extend(summaries);
    }
    Ok(all)
}

/// Factorization baselines against the coefficient solver on the uploads
/// of the first round of `seed`.
pub fn compare_decomposition(config: &ExperimentConfig, seed: u64) -> Result<Vec<ComparisonRow>> {
    let sim = Simulation::new(config.sim.clone(), Strategy::Fedit, seed)?;
    let updates = sim.client_updates()?;
    let weights = sim.client_weights(&updates)?;
    let pairs: Vec<_> = updates.iter().map(|u| &u.adapters[LAYER_ID]).collect();
    let problem = NaProblem::from_pairs(&pairs, weights.as_slice())?;
    compare_execution(&problem, config.sim.rank, &config.sim.solver)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn find_summaries(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            find_summaries(&path, found)?;
        } else if path.file_name().is_some_and(|n| n == "summary.json") {
            found.push(path);
        }
    }
    Ok(())
}

fn read_logs(path: &Path) -> Result<Vec<RoundLog>> {
    let mut logs = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            logs.push(serde_json::from_str(&line)?);
        }
    }
    Ok(logs)
}

type GroupKey = (Strategy, usize, u64);

/// Reads every cell under `run_dir` (a run or a sweep) and writes median-
/// over-seeds CSVs into `run_dir/plots`: divergence and generalization gap
/// per round, and final global metric per Dirichlet alpha.
pub fn emit_plots_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        return Err(Error::MissingArtifacts(run_dir.to_path_buf()));
    }
    let mut paths = Vec::new();
    find_summaries(run_dir, &mut paths)?;
    if paths.is_empty() {
        return Err(Error::MissingArtifacts(run_dir.to_path_buf()));
    }
    let mut groups: BTreeMap<GroupKey, Vec<(CellSummary, Vec<RoundLog>)>> = BTreeMap::new();
    for path in paths {
        let dir = path.parent().expect("file has a parent");
        let jsonl = dir.join("rounds.jsonl");
        if !jsonl.exists() {
            return Err(Error::MissingArtifacts(jsonl));
        }
        let summary: CellSummary = serde_json::from_slice(&fs::read(&path)?)?;
        let logs = read_logs(&jsonl)?;
        groups
            .entry((
                summary.strategy,
                summary.clients,
                summary.dirichlet_alpha.to_bits(),
            ))
            .or_default()
            .push((summary, logs));
    }

    let out = run_dir.join("plots");
    fs::create_dir_all(&out)?;
    let mut divergence_rows = Vec::new();
    let mut gap_rows = Vec::new();
    let mut final_rows = Vec::new();
    for ((strategy, clients, alpha_bits), cells) in &groups {
        let alpha = f64::from_bits(*alpha_bits).to_string();
        let seeds = cells.len().to_string();
        let rounds = cells.iter().map(|(_, l)| l.len()).min().unwrap_or(0);
        let key = |row: Vec<String>| {
            let mut full = vec![
                strategy.name().to_string(),
                clients.to_string(),
                alpha.clone(),
            ];
            full.extend(row);
            full.push(seeds.clone());
            full
        };
        for r in 0..rounds {
            let col = |f: fn(&RoundLog) -> f64| {
                median(&mut cells.iter().map(|(_, l)| f(&l[r])).collect::<Vec<_>>())
            };
            divergence_rows.push(key(vec![
                r.to_string(),
                col(|l| l.divergence.aggregate).to_string(),
            ]));
            gap_rows.push(key(vec![
                r.to_string(),
                col(|l| l.gen_gap).to_string(),
                col(|l| l.mean_local_metric).to_string(),
                col(|l| l.global_metric).to_string(),
            ]));
        }
        let mut finals: Vec<f64> = cells.iter().map(|(s, _)| s.final_global_metric).collect();
        let mut tails: Vec<f64> = cells.iter().map(|(s, _)| s.tail_gen_gap).collect();
        final_rows.push(key(vec![
            median(&mut finals).to_string(),
            median(&mut tails).to_string(),
        ]));
    }
    let files = [
        (
            "divergence_vs_round.csv",
            &PLOT_DIVERGENCE_HEADER[..],
            divergence_rows,
        ),
        ("gengap_vs_round.csv", &PLOT_GENGAP_HEADER[..], gap_rows),
        (
            "final_metric_vs_alpha.csv",
            &PLOT_FINAL_HEADER[..],
            final_rows,
        ),
    ];
    let mut written = Vec::new();
    for (name, header, rows) in files {
        let path = out.join(name);
        write_csv(&path, header, rows)?;
        written.push(path);
    }
    Ok(written)
}
