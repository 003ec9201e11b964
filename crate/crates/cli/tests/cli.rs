use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn fedlora(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlora"))
        .args(args)
        .env("FEDLORA_OUT", out)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    configs().join(name).display().to_string()
}

fn header(path: &Path) -> String {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string()
}

fn assert_ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstderr: {}",
        o.status,
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn run_writes_golden_headers() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlora(
        &[
            "run",
            "--config",
            &config("quick.toml"),
            "--strategies",
            "FEDIT,FLORA_NA",
            "--seeds",
            "1",
            "--threads",
            "2",
        ],
        dir.path(),
    );
    assert_ok(&o);
    let cell = dir.path().join("flora_na_seed1");
    assert_eq!(
        header(&cell.join("rounds.csv")),
        "round,strategy,seed,normalized_divergence,raw_gap,global_metric,mean_local_metric,gen_gap,train_loss,up_bytes,down_bytes,fedit_divergence"
    );
    assert_eq!(
        header(&cell.join("divergence.csv")),
        "round,strategy,normalized_divergence"
    );
    assert_eq!(
        header(&cell.join("divergence_layers.csv")),
        "round,strategy,layer,normalized,raw,raw_squared"
    );
    assert_eq!(
        header(&cell.join("gengap.csv")),
        "round,strategy,mean_local_metric,global_metric,gen_gap"
    );
    assert_eq!(
        header(&cell.join("comm.csv")),
        "round,client,dir,entries,bytes"
    );
    let rows = fs::read_to_string(cell.join("divergence.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 8);
    assert!(rows
        .lines()
        .skip(1)
        .all(|l| l.split(',').count() == 3 && l.contains(",FLORA_NA,")));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cell.join("summary.json")).unwrap()).unwrap();
    assert!(summary["rounds_to_target"].is_u64() || summary["rounds_to_target"].is_null());
    assert!(summary["final_global_metric"].is_f64());
    assert!(dir.path().join("fedit_seed1/meta.json").exists());
    assert!(!dir.path().join("fedit_seed2").exists());
}

#[test]
fn sweep_then_plots() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlora(
        &[
            "sweep",
            "--config",
            &config("alpha_sweep.toml"),
            "--seeds",
            "1,2",
            "--strategies",
            "FEDIT",
        ],
        dir.path(),
    );
    assert_ok(&o);
    let o = fedlora(&["emit-plots-data"], dir.path());
    assert_ok(&o);
    let plots = dir.path().join("plots");
    assert_eq!(
        header(&plots.join("final_metric_vs_alpha.csv")),
        "strategy,clients,dirichlet_alpha,median_final_global_metric,median_tail_gen_gap,seeds"
    );
    assert_eq!(
        header(&plots.join("divergence_vs_round.csv")),
        "strategy,clients,dirichlet_alpha,round,median_normalized_divergence,seeds"
    );
    assert_eq!(
        header(&plots.join("gengap_vs_round.csv")),
        "strategy,clients,dirichlet_alpha,round,median_gen_gap,median_mean_local_metric,median_global_metric,seeds"
    );
    let finals = fs::read_to_string(plots.join("final_metric_vs_alpha.csv")).unwrap();
    assert_eq!(finals.lines().count(), 1 + 4);
}

#[test]
fn compare_decomposition_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedlora(
        &[
            "compare-decomposition",
            "--config",
            &config("divergence.toml"),
        ],
        dir.path(),
    );
    assert_ok(&o);
    let table = fs::read_to_string(dir.path().join("decomposition.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,wall_clock_s,normalized_gap");
    let methods: Vec<&str> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(methods, ["SVD", "GRAM_SCHMIDT", "FLORA_NA"]);
}

#[test]
fn every_bundled_config_runs() {
    for entry in fs::read_dir(configs()).unwrap() {
        let path = entry.unwrap().path();
        let dir = tempfile::tempdir().unwrap();
        let o = fedlora(
            &["run", "--config", path.to_str().unwrap(), "--seeds", "1"],
            dir.path(),
        );
        assert_ok(&o);
        let o = fedlora(
            &["sweep", "--config", path.to_str().unwrap(), "--dry-run"],
            dir.path(),
        );
        assert_ok(&o);
        let o = fedlora(
            &["emit-plots-data", dir.path().to_str().unwrap()],
            dir.path(),
        );
        assert_ok(&o);
    }
}

#[test]
fn dry_run_echoes_documented_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let minimal = dir.path().join("minimal.toml");
    fs::write(
        &minimal,
        "clients = 4\nrounds = 2\n[task]\nkind = \"REGRESSION_TEACHER\"\n",
    )
    .unwrap();
    let o = fedlora(
        &["run", "--config", minimal.to_str().unwrap(), "--dry-run"],
        dir.path(),
    );
    assert_ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    for line in [
        "epochs = 1",
        "batch_size = 32",
        "learning_rate = 0.05",
        "rank = 8",
        "lora_alpha = 16.0",
        "dirichlet_alpha = 0.5",
        "precision = 32",
        "seeds = [0]",
        "input_dim = 32",
        "steps = 100",
        "mode = \"NONE\"",
    ] {
        assert!(
            text.lines().any(|l| l.trim() == line),
            "missing {line:?} in\n{text}"
        );
    }
    assert_eq!(
        text.lines()
            .filter(|l| l.starts_with("# ") && l.contains("_seed0"))
            .count(),
        7
    );
    assert!(
        fs::read_dir(dir.path()).unwrap().count() == 1,
        "dry run must not write artifacts"
    );
    let help = Command::new(env!("CARGO_BIN_EXE_fedlora"))
        .arg("--help")
        .output()
        .unwrap();
    let help = String::from_utf8(help.stdout).unwrap();
    assert!(help.contains("batch_size = 32") && help.contains("FLORA_NA"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(
        &bad,
        "clients = 4\nrounds = 2\nrank = -3\n[task]\nkind = \"REGRESSION_TEACHER\"\n",
    )
    .unwrap();
    let o = fedlora(&["run", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("rank"));

    fs::write(&bad, "clients = 4\nrounds = 2\ncolour = 1\n").unwrap();
    let o = fedlora(&["run", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));

    let o = fedlora(
        &[
            "run",
            "--config",
            &config("quick.toml"),
            "--strategies",
            "FEDAVG",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));

    let unstable = dir.path().join("unstable.toml");
    fs::write(
        &unstable,
        "clients = 2\nrounds = 2\nlearning_rate = 1e30\n[task]\nkind = \"REGRESSION_TEACHER\"\n",
    )
    .unwrap();
    let o = fedlora(
        &[
            "run",
            "--config",
            unstable.to_str().unwrap(),
            "--strategies",
            "FEDIT",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(3));

    let empty = tempfile::tempdir().unwrap();
    let o = fedlora(
        &["emit-plots-data", empty.path().to_str().unwrap()],
        dir.path(),
    );
    assert!(!o.status.success());
}
