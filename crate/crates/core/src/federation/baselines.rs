use super::{
    accuracy, active_weights, check_ids, evaluate_clients, grad_norm_at, sample_clients,
    train_local, ClientRecord, CommEvent, CommLedger, FederationConfig, RoundMetrics,
};
use crate::error::{Error, Result};
use crate::models::ParamVector;
use crate::par;
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone)]
pub struct FedAvgOutput {
    pub global: ParamVector,
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
}

#[derive(Debug, Clone)]
pub struct LocalOutput {
    pub metrics: Vec<RoundMetrics>,
    pub ledger: CommLedger,
}

/// Federated averaging over a homogeneous population.
///
/// The global model starts from the lowest-id active client's initial
/// parameters. Each round the sampled clients train from the global model and
/// the server averages the results with `p_k` renormalized over the sample.
/// Accuracy is the global model on each active client's test split.
pub fn run_fedavg(clients: &mut [ClientRecord], config: &FederationConfig) -> Result<FedAvgOutput> {
    check_ids(clients)?;
    let weights = active_weights(clients);
    config.validate(weights.len())?;
    let first = clients
        .iter()
        .find(|c| c.is_active())
        .ok_or_else(|| Error::config("no active clients"))?;
    let spec = first.spec;
    if clients
        .iter()
        .filter(|c| c.is_active())
        .any(|c| c.spec != spec)
    {
        return Err(Error::config(
            "FedAvg needs every active client to share one architecture",
        ));
    }
    spec.validate()?;
    let n_params = spec.param_count();
    let mut global = first.params.clone();
    let mut sampler = stream_rng(config.seed, Stream::Sampling, 0, 0);
    let mut ledger = CommLedger::default();
    let mut metrics = Vec::new();

    for round in 0..config.rounds {
        let selected = sample_clients(&weights, config.clients_per_round, &mut sampler)?;
        for _ in &selected {
            ledger.record(CommEvent::ParamDownlink { params: n_params });
        }
        let updates = par::map(config.execution, &selected, |&id| {
            train_local(
                &spec,
                &global,
                &clients[id].bundle.train,
                None,
                config,
                id,
                round,
            )
        });
        let mass: f64 = selected.iter().map(|&id| clients[id].p_k()).sum();
        let mut next: Option<Vec<f64>> = None;
        for (&id, update) in selected.iter().zip(updates) {
            let w = update?;
            ledger.record(CommEvent::ParamUplink { params: n_params });
            clients[id].last_selected_round = Some(round);
            let a = clients[id].p_k() / mass;
            match next.as_mut() {
                // Seeding with the first scaled update keeps a single-client
                // average bit-identical to that client's parameters.
                None => next = Some(w.as_slice().iter().map(|x| a * x).collect()),
                Some(acc) => acc
                    .iter_mut()
                    .zip(w.as_slice())
                    .for_each(|(s, x)| *s += a * x),
            }
        }
        global = ParamVector::new(next.expect("at least one client is sampled"));
        if !global.is_finite() {
            return Err(Error::Diverged {
                client: selected[0],
                round,
                step: config.local_iters,
            });
        }

        if config.is_eval_round(round) {
            let acc = clients
                .iter()
                .filter(|c| c.is_active())
                .map(|c| Ok((c.id, accuracy(&spec, &global, &c.bundle.test)?)))
                .collect::<Result<Vec<_>>>()?;
            let norms = par::map(config.execution, &selected, |&id| {
                grad_norm_at(&spec, &global, &clients[id].bundle.train, None, 0.0).map(|g| (id, g))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            metrics.push(RoundMetrics::new(round, acc, norms, &ledger));
        }
    }
    Ok(FedAvgOutput {
        global,
        metrics,
        ledger,
    })
}

/// Every active client trains alone each round with the same local schedule
/// and substreams as the federated runs. Nothing is communicated.
pub fn run_local_only(
    clients: &mut [ClientRecord],
    config: &FederationConfig,
) -> Result<LocalOutput> {
    check_ids(clients)?;
    let active: Vec<usize> = clients
        .iter()
        .filter(|c| c.is_active())
        .map(|c| c.id)
        .collect();
    if active.is_empty() {
        return Err(Error::config("no active clients"));
    }
    let solo = FederationConfig {
        lambda: 0.0,
        clients_per_round: 1,
        clusters: 1,
        ..config.clone()
    };
    solo.validate(active.len())?;
    let ledger = CommLedger::default();
    let mut metrics = Vec::new();

    for round in 0..config.rounds {
        let updates = par::map(config.execution, &active, |&id| {
            let c = &clients[id];
            train_local(&c.spec, &c.params, &c.bundle.train, None, &solo, id, round)
        });
        for (&id, update) in active.iter().zip(updates) {
            clients[id].params = update?;
            clients[id].last_selected_round = Some(round);
        }
        if solo.is_eval_round(round) {
            let acc = evaluate_clients(clients)?;
            let norms = par::map(config.execution, &active, |&id| {
                let c = &clients[id];
                grad_norm_at(&c.spec, &c.params, &c.bundle.train, None, 0.0).map(|g| (id, g))
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            metrics.push(RoundMetrics::new(round, acc, norms, &ledger));
        }
    }
    Ok(LocalOutput { metrics, ledger })
}
