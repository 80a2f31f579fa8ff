use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use perfed_core::data::summarize_partition;
use perfed_core::experiment::{build_population, partition_shards, Population};
use perfed_core::federation::io::{write_checkpoint, write_metrics_csv};
use perfed_core::federation::{
    fedavg_closed_form, perfed_closed_form, run_fedavg, run_local_only, run_perfed_ckt, CommLedger,
    Divergence, RoundMetrics,
};
use perfed_core::theory::{
    run_theory_check, run_toy_with, toy_win_rates, write_toy_csv, ToyReport,
};
use serde::Serialize;
use serde_json::json;

use crate::config::{Algorithm, RunConfig};
use crate::CliError;

pub const TOY_SEEDS: u64 = 10;

/// Outcome of a command that completed without a hard error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok,
    /// A theory check ran and at least one task failed.
    CheckFailed,
    /// The run finished but some client diverged along the way.
    Diverged,
}

fn create_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })
}

fn create_file(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(perfed_core::Error::from)?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(perfed_core::Error::from)?;
    Ok(())
}

pub fn run(cfg: &RunConfig) -> Result<Status, CliError> {
    match cfg.algorithm {
        Algorithm::PerfedCkt | Algorithm::Fedavg | Algorithm::Local => run_federated(cfg),
        Algorithm::TheoryCheck => theory_check(cfg),
        Algorithm::Toy => toy(cfg),
    }
}

struct Finished {
    metrics: Vec<RoundMetrics>,
    ledger: CommLedger,
    closed_form: Option<u64>,
    divergences: Vec<Divergence>,
}

fn run_federated(cfg: &RunConfig) -> Result<Status, CliError> {
    let Population {
        mut clients,
        pool,
        partition,
    } = build_population(&cfg.data, &cfg.model.to_core(), cfg.seed)?;
    let active = clients.iter().filter(|c| c.is_active()).count();
    let fed = cfg.federation.to_core(cfg.seed, cfg.data.num_clients)?;
    fed.validate(active).map_err(|e| {
        CliError::Config(format!(
            "federation: {e} ({active} of {} clients active)",
            clients.len()
        ))
    })?;
    create_out(&cfg.out)?;

    let done = match cfg.algorithm {
        Algorithm::PerfedCkt => {
            let out = run_perfed_ckt(&mut clients, &pool, &fed)?;
            let m = fed.clients_per_round;
            Finished {
                closed_form: Some(perfed_closed_form(
                    fed.rounds,
                    m,
                    pool.len(),
                    cfg.data.num_classes,
                    fed.clusters,
                )),
                metrics: out.metrics,
                ledger: out.ledger,
                divergences: out.divergences,
            }
        }
        Algorithm::Fedavg => {
            let out = run_fedavg(&mut clients, &fed)?;
            let params = out.global.len();
            // Every client ends up holding the global model.
            for c in clients.iter_mut().filter(|c| c.is_active()) {
                c.params = out.global.clone();
            }
            Finished {
                closed_form: Some(fedavg_closed_form(
                    fed.rounds,
                    fed.clients_per_round,
                    params,
                )),
                metrics: out.metrics,
                ledger: out.ledger,
                divergences: Vec::new(),
            }
        }
        _ => {
            let out = run_local_only(&mut clients, &fed)?;
            Finished {
                closed_form: Some(0),
                metrics: out.metrics,
                ledger: out.ledger,
                divergences: Vec::new(),
            }
        }
    };

    write_metrics_csv(create_file(&cfg.out.join("metrics.csv"))?, &done.metrics)?;
    write_checkpoint(&cfg.out.join("checkpoint"), &clients)?;
    let summary = json!({
        "algorithm": cfg.algorithm,
        "config": cfg,
        "clients": clients.len(),
        "active_clients": active,
        "clients_per_round": fed.clients_per_round,
        "public_pool_size": pool.len(),
        "partition": {
            "empty_clients": partition.empty_clients,
            "max_min_shard_ratio": partition.max_min_shard_ratio,
            "mean_entropy": partition.mean_entropy,
        },
        "final": done.metrics.last(),
        "comm": {
            "uplink": done.ledger.uplink_scalars,
            "downlink": done.ledger.downlink_scalars,
            "total": done.ledger.total(),
            "closed_form_total": done.closed_form,
        },
        "divergences": done.divergences,
    });
    write_json(&cfg.out.join("summary.json"), &summary)?;

    if let Some(last) = done.metrics.last() {
        println!(
            "{:?}: round {} mean accuracy {:.4} (std {:.4}), grad norm {:.3e}, communicated {} scalars",
            cfg.algorithm,
            last.round,
            last.mean_acc,
            last.std_acc,
            last.grad_norm,
            done.ledger.total()
        );
    }
    println!("wrote {}", cfg.out.display());
    if done.divergences.is_empty() {
        Ok(Status::Ok)
    } else {
        for d in &done.divergences {
            eprintln!(
                "client {} diverged in round {} at local step {}",
                d.client, d.round, d.step
            );
        }
        Ok(Status::Diverged)
    }
}

pub fn theory_check(cfg: &RunConfig) -> Result<Status, CliError> {
    create_out(&cfg.out)?;
    let report = run_theory_check(&cfg.theory)?;
    write_json(&cfg.out.join("theory_report.json"), &report)?;
    for (i, t) in report.tasks.iter().enumerate() {
        for c in &t.checks {
            let verdict = match (c.gating, c.pass) {
                (true, true) => "PASS",
                (true, false) => "FAIL",
                (false, true) => "ok (informational)",
                (false, false) => "off (informational)",
            };
            println!(
                "task {i} (K={} d={}) {}: {verdict} ({})",
                t.inputs.clients, t.inputs.d, c.name, c.detail
            );
        }
    }
    println!("overall: {}", if report.all_pass { "PASS" } else { "FAIL" });
    Ok(if report.all_pass {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

pub fn toy(cfg: &RunConfig) -> Result<Status, CliError> {
    create_out(&cfg.out)?;
    let reports = (cfg.seed..cfg.seed + TOY_SEEDS)
        .map(|s| run_toy_with(&cfg.toy, s))
        .collect::<perfed_core::Result<Vec<ToyReport>>>()?;
    write_toy_csv(create_file(&cfg.out.join("toy.csv"))?, &reports)?;
    let w = toy_win_rates(&reports);
    let n = w.seeds;
    println!(
        "win rate clustered vs uniform: client 0 {}/{n}, client 1 {}/{n}; uniform vs FedAvg for client 2 {}/{n}",
        w.clustered_beats_uniform[0], w.clustered_beats_uniform[1], w.uniform_beats_fedavg_far_client
    );
    Ok(Status::Ok)
}

pub fn partition_stats(cfg: &RunConfig) -> Result<Status, CliError> {
    let (_, shards) = partition_shards(&cfg.data, cfg.seed)?;
    let summary = summarize_partition(&shards);
    create_out(&cfg.out)?;
    write_json(&cfg.out.join("partition.json"), &summary)?;
    println!(
        "{} clients ({} empty), mean label entropy {:.4} nats, median {:.4}, max/min shard ratio {}",
        summary.num_clients,
        summary.empty_clients,
        summary.mean_entropy,
        summary.median_entropy,
        summary
            .max_min_shard_ratio
            .map_or_else(|| "n/a".to_string(), |r| format!("{r:.2}"))
    );
    Ok(Status::Ok)
}
