use serde::Serialize;

use super::{
    active_weights, check_ids, client_local_round, evaluate_clients, grad_norm_monitor,
    sample_clients, ClientRecord, CommEvent, CommLedger, FederationConfig, RoundMetrics,
};
use crate::clustering::{assign_nearest, cmeans_fit, CentroidSet, ClientId, LogitStack};
use crate::data::PublicPool;
use crate::error::{Error, Result};
use crate::models::{forward_logits, LogitMatrix, ParamVector};
use crate::par;
use crate::rng::{derive_seed, stream_rng, Stream};

/// A client whose local round produced non-finite parameters. Its model was
/// re-initialized and its upload dropped for that round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub client: ClientId,
    pub round: usize,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct PerfedOutput {
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
    pub divergences: Vec<Divergence>,
    /// Centroids used in each round; filled only when `record_centroids` is set.
    pub centroid_history: Vec<CentroidSet>,
    /// Logits uploaded in the last round.
    pub final_stack: LogitStack,
}

struct ClientOutcome {
    params: ParamVector,
    logits: LogitMatrix,
    target: Option<LogitMatrix>,
}

fn check_population(clients: &[ClientRecord], pool: &PublicPool) -> Result<usize> {
    check_ids(clients)?;
    let mut width = None;
    for c in clients.iter().filter(|c| c.is_active()) {
        c.spec.validate()?;
        if !c.spec.is_classifier() {
            return Err(Error::config(format!(
                "client {} does not output class probabilities",
                c.id
            )));
        }
        if c.spec.input_dim() != pool.dim() {
            return Err(Error::Shape {
                what: "public pool dimension",
                expected: c.spec.input_dim(),
                found: pool.dim(),
            });
        }
        match width {
            None => width = Some(c.spec.output_width()),
            Some(w) if w != c.spec.output_width() => {
                return Err(Error::config("clients disagree on the number of classes"));
            }
            _ => {}
        }
    }
    width.ok_or_else(|| Error::config("no active clients"))
}

fn centroid_matrix(
    centroids: &CentroidSet,
    cluster: usize,
    rows: usize,
    width: usize,
) -> Result<LogitMatrix> {
    LogitMatrix::new(rows, width, centroids.centroids[cluster].clone())
}

/// Clustered co-distillation of logits.
///
/// Each round the server clusters the previous round's uploads into
/// `min(c, uploads)` groups and broadcasts every centroid to the newly sampled
/// clients. Each client distills toward the centroid nearest to its current
/// predictions on the pool, runs `tau` local steps and uploads fresh logits.
/// Round 0 clusters the logits of an initial sample of untrained models; that
/// bootstrap exchange is not charged to the ledger.
pub fn run_perfed_ckt(
    clients: &mut [ClientRecord],
    pool: &PublicPool,
    config: &FederationConfig,
) -> Result<PerfedOutput> {
    let width = check_population(clients, pool)?;
    let weights = active_weights(clients);
    config.validate(weights.len())?;
    if pool.is_empty() {
        return Err(Error::config("public pool is empty"));
    }
    let m = config.clients_per_round;
    let rows = pool.len();
    let mut sampler = stream_rng(config.seed, Stream::Sampling, 0, 0);

    let bootstrap = sample_clients(&weights, m, &mut sampler)?;
    let mut stack = LogitStack::new();
    let initial = par::map(config.execution, &bootstrap, |&id| {
        let c = &clients[id];
        forward_logits(&c.spec, &c.params, pool.inputs())
    });
    for (&id, logits) in bootstrap.iter().zip(initial) {
        stack.push(id, logits?.into_values())?;
    }

    let mut ledger = CommLedger::default();
    let mut metrics = Vec::new();
    let mut divergences = Vec::new();
    let mut centroid_history = Vec::new();

    for round in 0..config.rounds {
        let centroids = if stack.is_empty() {
            None
        } else {
            let c = config.clusters.min(stack.len());
            let seed = derive_seed(config.seed, Stream::Clustering, round as u64, 0);
            Some(cmeans_fit(&stack, c, config.kmeans_max_iters, config.kmeans_tol, seed)?.centroids)
        };
        let selected = sample_clients(&weights, m, &mut sampler)?;
        if let Some(cs) = &centroids {
            ledger.record(CommEvent::CentroidDownlink {
                clients: selected.len(),
                clusters: cs.len(),
                pool_size: rows,
                classes: width,
            });
            if config.record_centroids {
                centroid_history.push(cs.clone());
            }
        }

        let outcomes = par::map(
            config.execution,
            &selected,
            |&id| -> Result<ClientOutcome> {
                let rec = &clients[id];
                let target =
                    match &centroids {
                        Some(cs) => {
                            let own = forward_logits(&rec.spec, &rec.params, pool.inputs())
                                .map_err(|e| match e {
                                    Error::NonFinite { .. } => Error::Diverged {
                                        client: id,
                                        round,
                                        step: 0,
                                    },
                                    other => other,
                                })?;
                            let j = assign_nearest(own.values(), cs);
                            Some(centroid_matrix(cs, j, rows, width)?)
                        }
                        None => None,
                    };
                let (params, logits) =
                    client_local_round(rec, target.as_ref(), pool, config, round)?;
                Ok(ClientOutcome {
                    params,
                    logits,
                    target,
                })
            },
        );

        let mut next = LogitStack::new();
        let mut targets: Vec<(ClientId, Option<LogitMatrix>)> = Vec::new();
        for (&id, outcome) in selected.iter().zip(outcomes) {
            let rec = &mut clients[id];
            rec.last_selected_round = Some(round);
            match outcome {
                Ok(o) => {
                    rec.params = o.params;
                    next.push(id, o.logits.into_values())?;
                    targets.push((id, o.target));
                }
                Err(Error::Diverged {
                    client,
                    round,
                    step,
                }) => {
                    divergences.push(Divergence {
                        client,
                        round,
                        step,
                    });
                    rec.reinitialize(config.seed, round);
                }
                Err(e) => return Err(e),
            }
        }
        ledger.record(CommEvent::LogitUplink {
            clients: next.len(),
            pool_size: rows,
            classes: width,
        });
        stack = next;

        if config.is_eval_round(round) {
            let accuracy = evaluate_clients(clients)?;
            let norms = par::map(config.execution, &targets, |(id, target)| {
                grad_norm_monitor(&clients[*id], target.as_ref(), pool, config.lambda)
                    .map(|g| (*id, g))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            metrics.push(RoundMetrics::new(round, accuracy, norms, &ledger));
        }
    }

    Ok(PerfedOutput {
        metrics,
        ledger,
        divergences,
        centroid_history,
        final_stack: stack,
    })
}
