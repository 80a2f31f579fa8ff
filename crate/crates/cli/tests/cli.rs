use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::Value;
use tempfile::TempDir;

fn perfed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_perfed"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn run(config: &Path, out: &Path) -> Output {
    perfed(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

const SMALL_DATA: &str = r#"
[data]
num_classes = 3
dim = 4
samples_per_class = 60
pool_size = 30
pool_samples_per_class = 10
alpha = 5.0
"#;

fn small_config(num_clients: usize, federation: &str) -> String {
    format!("seed = 4\n{SMALL_DATA}num_clients = {num_clients}\n\n[federation]\n{federation}\n")
}

#[test]
fn smoke_run_emits_one_metrics_row() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &small_config(2, "rounds = 1\nclients_per_round = 1\nclusters = 1"),
    );
    let start = Instant::now();
    let out = run(&cfg, &dir.path().join("r"));
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,mean_acc,std_acc,grad_norm,uplink,downlink");
    assert_eq!(lines.len(), 2);
    assert!(dir.path().join("r/checkpoint/manifest.json").exists());
    assert!(dir.path().join("r/summary.json").exists());
}

#[test]
fn identical_config_gives_identical_bytes() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &small_config(
            6,
            "rounds = 4\nclients_per_round = 3\nclusters = 2\nlocal_iters = 3",
        ),
    );
    for name in ["a", "b"] {
        assert_eq!(code(&run(&cfg, &dir.path().join(name))), 0);
    }
    for file in [
        "metrics.csv",
        "checkpoint/client_0000.bin",
        "checkpoint/client_0005.bin",
    ] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
}

#[test]
fn summary_config_replays_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &small_config(5, "rounds = 3\nclient_fraction = 0.6\nclusters = 2\nlambda = 0.3\nlr = \"robbins_monro\"\neta = 0.2\ndecay = 0.5"),
    );
    assert_eq!(code(&run(&cfg, &dir.path().join("first"))), 0);
    let summary = dir.path().join("first/summary.json");
    let out = run(&summary, &dir.path().join("replay"));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["metrics.csv", "checkpoint/client_0002.bin"] {
        assert_eq!(
            fs::read(dir.path().join("first").join(file)).unwrap(),
            fs::read(dir.path().join("replay").join(file)).unwrap()
        );
    }
    let a = read_json(&summary);
    let b = read_json(&dir.path().join("replay/summary.json"));
    assert_eq!(a["comm"], b["comm"]);
    assert_eq!(a["final"], b["final"]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &small_config(4, "rounds = 2\nclients_per_round = 2\nclusters = 1"),
    );
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let c = cfg.to_str().unwrap();
    assert_eq!(
        code(&perfed(&[
            "run",
            "--config",
            c,
            "--out",
            &p("s4"),
            "--seed",
            "4"
        ])),
        0
    );
    assert_eq!(
        code(&perfed(&[
            "run",
            "--config",
            c,
            "--out",
            &p("s5"),
            "--seed",
            "5"
        ])),
        0
    );
    assert_eq!(code(&run(&cfg, &dir.path().join("plain"))), 0);
    let csv = |n: &str| fs::read(dir.path().join(n).join("metrics.csv")).unwrap();
    assert_eq!(csv("s4"), csv("plain"));
    assert_ne!(csv("s5"), csv("plain"));
    assert_eq!(
        read_json(&dir.path().join("s5/summary.json"))["config"]["seed"],
        5
    );
}

#[test]
fn cluster_sweep_differs_by_downlink_formula() {
    let dir = TempDir::new().unwrap();
    let (rounds, m, pool, classes) = (4u64, 3u64, 30u64, 3u64);
    let mut totals = Vec::new();
    for c in 1..=3 {
        let cfg = write(
            dir.path(),
            &format!("c{c}.toml"),
            &small_config(
                6,
                &format!("rounds = {rounds}\nclients_per_round = {m}\nclusters = {c}"),
            ),
        );
        let out_dir = dir.path().join(format!("r{c}"));
        assert_eq!(code(&run(&cfg, &out_dir)), 0);
        let s = read_json(&out_dir.join("summary.json"));
        assert_eq!(s["divergences"].as_array().unwrap().len(), 0);
        let comm = &s["comm"];
        assert_eq!(comm["total"], comm["closed_form_total"]);
        totals.push((
            comm["uplink"].as_u64().unwrap(),
            comm["downlink"].as_u64().unwrap(),
        ));
    }
    for w in totals.windows(2) {
        assert_eq!(w[0].0, w[1].0);
        assert_eq!(w[1].1 - w[0].1, rounds * m * pool * classes);
    }
}

#[test]
fn baselines_run_and_report_their_communication() {
    let dir = TempDir::new().unwrap();
    for (algo, expect_zero) in [("fedavg", false), ("local", true)] {
        let text = format!(
            "algorithm = \"{algo}\"\n{}",
            small_config(4, "rounds = 2\nclients_per_round = 2\nclusters = 1")
        );
        let cfg = write(dir.path(), &format!("{algo}.toml"), &text);
        let out_dir = dir.path().join(algo);
        let out = run(&cfg, &out_dir);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let s = read_json(&out_dir.join("summary.json"));
        assert_eq!(s["comm"]["total"], s["comm"]["closed_form_total"]);
        assert_eq!(s["comm"]["total"].as_u64().unwrap() == 0, expect_zero);
    }
}

#[test]
fn malformed_config_exits_2_with_line_and_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "seed = 1\n[federation]\nrounds = 2\nlamda = 0.5\n",
    );
    let out = run(&cfg, &dir.path().join("r"));
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("line 4") && err.contains("lamda"), "{err}");

    let cfg = write(dir.path(), "type.toml", "[data]\nnum_clients = \"many\"\n");
    let out = run(&cfg, &dir.path().join("r"));
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn invalid_values_exit_2_before_any_output() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        &small_config(4, "clients_per_round = 2\nclusters = 3"),
    );
    let out_dir = dir.path().join("r");
    let out = run(&cfg, &out_dir);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("clusters"), "{}", stderr(&out));
    assert!(!out_dir.exists());

    let missing = run(&dir.path().join("nope.toml"), &out_dir);
    assert_eq!(code(&missing), 2);

    let text = format!(
        "algorithm = \"fedavg\"\n{}\n[model]\nkind = \"tercile\"\nhidden_medium = 4\nhidden_large = 8\n",
        small_config(9, "clients_per_round = 2\nclusters = 1")
    );
    let hetero = write(dir.path(), "hetero.toml", &text);
    assert_eq!(code(&run(&hetero, &out_dir)), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    for algo in ["perfed_ckt", "fedavg", "local"] {
        let text = format!(
            "algorithm = \"{algo}\"\n{}",
            small_config(
                4,
                "rounds = 2\nclients_per_round = 2\nclusters = 1\neta = 1e308"
            )
        );
        let cfg = write(dir.path(), &format!("{algo}.toml"), &text);
        let out = run(&cfg, &dir.path().join(algo));
        assert_eq!(code(&out), 3, "{algo}: {}", stderr(&out));
        assert!(stderr(&out).contains("diverged"), "{}", stderr(&out));
    }
}

const HOMOGENEOUS_TASK: &str = r#"
[[theory.tasks]]
d = 2
clients = 3
sigma = 1.0
upsilon = [1.0, 1.0, 1.0]
beta = 1.0
nu = 1.0
n = 4
seed = 21
"#;

fn theory(dir: &Path, name: &str, extra: &str, flags: &[&str]) -> (Output, PathBuf) {
    let cfg = write(
        dir,
        &format!("{name}.toml"),
        &format!("[theory]\nnum_samples = 20000\n{extra}\n{HOMOGENEOUS_TASK}"),
    );
    let out_dir = dir.join(name);
    let mut args = vec![
        "theory-check",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ];
    args.extend_from_slice(flags);
    (perfed(&args), out_dir)
}

#[test]
fn theory_check_homogeneous_task_passes() {
    let dir = TempDir::new().unwrap();
    let (out, _) = theory(dir.path(), "printed", "", &[]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
}

#[test]
fn theory_check_posterior_matched_variant_passes() {
    let dir = TempDir::new().unwrap();
    let (out, out_dir) = theory(
        dir.path(),
        "matched",
        "variant = \"posterior_matched\"",
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(
        text.contains("loss_within_2pct: PASS") && !text.contains("FAIL"),
        "{text}"
    );
    let report = read_json(&out_dir.join("theory_report.json"));
    let task = &report["tasks"][0];
    assert!(task["oracle"]["closed_form_loss"].is_f64());
    assert!(task["oracle"]["best_loss"].is_f64());
    assert!(task["relative_gap"].is_f64());
    assert_eq!(report["all_pass"], true);
}

#[test]
fn theory_check_flags_corrupted_lambda() {
    let dir = TempDir::new().unwrap();
    let (out, out_dir) = theory(
        dir.path(),
        "corrupt",
        "variant = \"posterior_matched\"",
        &["--lambda-scale", "10"],
    );
    assert_eq!(code(&out), 1, "{}", stdout(&out));
    assert!(stdout(&out).contains("FAIL"));
    let report = read_json(&out_dir.join("theory_report.json"));
    assert_eq!(report["all_pass"], false);
    assert!(report["tasks"][0]["relative_gap"].as_f64().unwrap() > 0.02);
}

#[test]
fn toy_writes_long_csv_and_win_rates() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().join("toy");
    let out = perfed(&["toy", "--seed", "0", "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let csv = fs::read_to_string(out_dir.join("toy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "seed,client,model,w0,w1,distance");
    assert_eq!(lines.len(), 1 + 4 * 3 * 10);
    assert_eq!(
        lines
            .iter()
            .filter(|l| l.split(',').nth(2) == Some("fedavg"))
            .count(),
        30
    );
    let text = stdout(&out);
    let wins: Vec<u32> = text
        .split_whitespace()
        .filter_map(|w| w.trim_end_matches([',', ';']).strip_suffix("/10"))
        .map(|w| w.parse().unwrap())
        .collect();
    assert_eq!(wins.len(), 3, "{text}");
    assert!(wins[0] >= 9 && wins[1] >= 9, "{text}");
}

#[test]
fn toy_unwritable_path_exits_2() {
    let dir = TempDir::new().unwrap();
    let file = write(dir.path(), "plain", "not a directory");
    let out = perfed(&["toy", "--out", file.join("sub").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

fn partition(dir: &Path, name: &str, data: &str) -> Value {
    let cfg = write(dir, &format!("{name}.toml"), &format!("[data]\n{data}\n"));
    let out_dir = dir.join(name);
    let out = perfed(&[
        "partition-stats",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    read_json(&out_dir.join("partition.json"))
}

#[test]
fn partition_stats_uniform_limit() {
    let dir = TempDir::new().unwrap();
    let s = partition(
        dir.path(),
        "flat",
        "num_classes = 10\nnum_clients = 4\nalpha = 1e6",
    );
    assert_eq!(s["clients"].as_array().unwrap().len(), 4);
    let ln_n = 10f64.ln();
    let mean = s["mean_entropy"].as_f64().unwrap();
    assert!((mean - ln_n).abs() <= 0.05 * ln_n, "{mean} vs {ln_n}");
}

#[test]
fn partition_stats_strong_skew() {
    let dir = TempDir::new().unwrap();
    let s = partition(
        dir.path(),
        "skew",
        "num_classes = 10\nnum_clients = 100\nalpha = 0.01",
    );
    let clients = s["clients"].as_array().unwrap();
    assert_eq!(clients.len(), 100);
    for c in clients {
        assert_eq!(c["histogram"].as_array().unwrap().len(), 10);
    }
    assert!(
        s["median_entropy"].as_f64().unwrap() < 0.7,
        "{}",
        s["median_entropy"]
    );
    assert!(s["max_min_shard_ratio"].as_f64().unwrap() > 1.0);
}
