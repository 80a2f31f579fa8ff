//! Simulated federation: clustered logit co-distillation, FedAvg and local-only
//! baselines, client sampling, step-size schedules and monitoring.
//!
//! Within a round the selected clients run independently; each owns generators
//! derived from `(master seed, client id, round)`, so sequential and parallel
//! execution give bit-identical results.

mod baselines;
mod comm;
pub mod io;
mod perfed;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use baselines::{run_fedavg, run_local_only, FedAvgOutput, LocalOutput};
pub use comm::{account_comm, fedavg_closed_form, perfed_closed_form, CommEvent, CommLedger};
pub use perfed::{run_perfed_ckt, Divergence, PerfedOutput};

use crate::clustering::ClientId;
use crate::data::{minibatch, ClientDataBundle, Dataset, PublicPool};
use crate::error::{Error, Result};
use crate::models::{
    forward_logits, grad_phi_stochastic, init_params, DistillBatch, LogitMatrix, ModelSpec,
    ParamVector,
};
use crate::par::Execution;
use crate::rng::{derive_seed, stream_rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant {
        eta: f64,
    },
    /// `eta0 / (1 + decay·t)`: divergent sum, convergent sum of squares for `decay > 0`.
    RobbinsMonro {
        eta0: f64,
        decay: f64,
    },
}

pub fn lr_schedule(schedule: &LrSchedule, round: usize) -> f64 {
    match *schedule {
        LrSchedule::Constant { eta } => eta,
        LrSchedule::RobbinsMonro { eta0, decay } => eta0 / (1.0 + decay * round as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_iters: usize,
    /// `m`, selected clients per round.
    pub clients_per_round: usize,
    pub batch: usize,
    pub public_batch: usize,
    pub lambda: f64,
    pub clusters: usize,
    pub lr: LrSchedule,
    pub seed: u64,
    pub eval_interval: usize,
    pub execution: Execution,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    pub record_centroids: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            local_iters: 5,
            clients_per_round: 5,
            batch: 32,
            public_batch: 64,
            lambda: 1.0,
            clusters: 2,
            lr: LrSchedule::Constant { eta: 0.05 },
            seed: 0,
            eval_interval: 1,
            execution: Execution::Parallel,
            kmeans_max_iters: crate::clustering::DEFAULT_MAX_ITERS,
            kmeans_tol: crate::clustering::DEFAULT_TOL,
            record_centroids: false,
        }
    }
}

/// `m = round(C·K)`, at least 1.
pub fn clients_for_fraction(fraction: f64, num_clients: usize) -> usize {
    ((fraction * num_clients as f64).round() as usize).clamp(1, num_clients.max(1))
}

impl FederationConfig {
    pub fn validate(&self, active_clients: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return fail("rounds must be at least 1".into());
        }
        if self.local_iters == 0 {
            return fail("local_iters must be at least 1".into());
        }
        if self.clients_per_round == 0 || self.clients_per_round > active_clients {
            return fail(format!(
                "clients_per_round {} must be in 1..={active_clients} (active clients)",
                self.clients_per_round
            ));
        }
        if self.clusters == 0 || self.clusters > self.clients_per_round {
            return fail(format!(
                "clusters {} must be in 1..={}",
                self.clusters, self.clients_per_round
            ));
        }
        if self.batch == 0 || self.public_batch == 0 {
            return fail("batch sizes must be positive".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be finite and non-negative".into());
        }
        if self.eval_interval == 0 {
            return fail("eval_interval must be at least 1".into());
        }
        let lr_ok = match self.lr {
            LrSchedule::Constant { eta } => eta >= 0.0 && eta.is_finite(),
            LrSchedule::RobbinsMonro { eta0, decay } => {
                eta0 >= 0.0 && eta0.is_finite() && decay >= 0.0 && decay.is_finite()
            }
        };
        if !lr_ok {
            return fail("learning-rate schedule must be finite and non-negative".into());
        }
        if self.kmeans_max_iters == 0 {
            return fail("kmeans_max_iters must be at least 1".into());
        }
        Ok(())
    }

    fn is_eval_round(&self, round: usize) -> bool {
        (round + 1).is_multiple_of(self.eval_interval) || round + 1 == self.rounds
    }
}

/// Persistent per-client state.
#[derive(Debug, Clone)]
pub struct ClientRecord {
    pub id: ClientId,
    pub spec: ModelSpec,
    pub params: ParamVector,
    pub bundle: ClientDataBundle,
    pub last_selected_round: Option<usize>,
}

impl ClientRecord {
    /// Fresh client with parameters from the `init` substream of `master_seed`.
    pub fn new(id: ClientId, spec: ModelSpec, bundle: ClientDataBundle, master_seed: u64) -> Self {
        let params = init_params(&spec, derive_seed(master_seed, Stream::Init, id as u64, 0));
        Self {
            id,
            spec,
            params,
            bundle,
            last_selected_round: None,
        }
    }

    pub fn is_active(&self) -> bool {
        self.bundle.active
    }

    pub fn p_k(&self) -> f64 {
        self.bundle.p_k
    }

    pub(crate) fn reinitialize(&mut self, master_seed: u64, round: usize) {
        self.params = init_params(
            &self.spec,
            derive_seed(master_seed, Stream::Init, self.id as u64, round as u64 + 1),
        );
    }
}

pub(crate) fn check_ids(clients: &[ClientRecord]) -> Result<()> {
    if let Some((i, c)) = clients.iter().enumerate().find(|(i, c)| c.id != *i) {
        return Err(Error::config(format!(
            "client at position {i} has id {}",
            c.id
        )));
    }
    Ok(())
}

pub(crate) fn active_weights(clients: &[ClientRecord]) -> Vec<(ClientId, f64)> {
    clients
        .iter()
        .filter(|c| c.is_active())
        .map(|c| (c.id, c.p_k()))
        .collect()
}

/// `m` successive draws without replacement, each proportional to the remaining weights.
pub fn sample_clients<R: Rng + ?Sized>(
    weights: &[(ClientId, f64)],
    m: usize,
    rng: &mut R,
) -> Result<Vec<ClientId>> {
    let mut pool: Vec<(ClientId, f64)> =
        weights.iter().copied().filter(|(_, w)| *w > 0.0).collect();
    if m > pool.len() {
        return Err(Error::config(format!(
            "cannot select {m} clients from {} with positive weight",
            pool.len()
        )));
    }
    let mut chosen = Vec::with_capacity(m);
    for _ in 0..m {
        let dist = WeightedIndex::new(pool.iter().map(|(_, w)| *w))
            .map_err(|e| Error::config(format!("client weights: {e}")))?;
        let (id, _) = pool.remove(dist.sample(rng));
        chosen.push(id);
    }
    Ok(chosen)
}

/// Runs `tau` steps of `w <- w - eta_t · g_k(w; sbar)` from `start`.
///
/// Private and public mini-batches come from separate substreams keyed by
/// `(client, round)`; batch sizes are clamped to the available rows. The
/// distillation target stays fixed for all steps.
#[allow(clippy::too_many_arguments)]
pub(crate) fn train_local(
    spec: &ModelSpec,
    start: &ParamVector,
    train: &Dataset,
    distill: Option<(&PublicPool, &LogitMatrix)>,
    config: &FederationConfig,
    client: ClientId,
    round: usize,
) -> Result<ParamVector> {
    let eta = lr_schedule(&config.lr, round);
    let mut w = start.clone();
    let mut private_rng = stream_rng(
        config.seed,
        Stream::LocalPrivate,
        client as u64,
        round as u64,
    );
    let mut public_rng = stream_rng(
        config.seed,
        Stream::LocalPublic,
        client as u64,
        round as u64,
    );
    let b = config.batch.min(train.len());
    let diverged = |step| Error::Diverged {
        client,
        round,
        step,
    };

    for step in 0..config.local_iters {
        let idx = minibatch(train.len(), b, &mut private_rng);
        let batch_data = train.subset(&idx);
        let public_rows;
        let public_targets;
        let distill_batch = match distill {
            Some((pool, sbar)) if config.lambda != 0.0 => {
                let pidx = minibatch(
                    pool.len(),
                    config.public_batch.min(pool.len()),
                    &mut public_rng,
                );
                public_rows = pool.rows(&pidx);
                public_targets = sbar.gather(&pidx);
                Some(DistillBatch {
                    inputs: &public_rows,
                    targets: &public_targets,
                })
            }
            _ => None,
        };
        let g = grad_phi_stochastic(
            spec,
            &w,
            &batch_data.batch(),
            distill_batch.as_ref(),
            config.lambda,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => diverged(step),
            other => other,
        })?;
        w.step(&g, eta);
        if !w.is_finite() {
            return Err(diverged(step));
        }
    }
    Ok(w)
}

/// One client's local round: `tau` distillation-regularized SGD steps, then
/// the updated model's logits on the full public pool.
pub fn client_local_round(
    record: &ClientRecord,
    sbar: Option<&LogitMatrix>,
    pool: &PublicPool,
    config: &FederationConfig,
    round: usize,
) -> Result<(ParamVector, LogitMatrix)> {
    if let Some(s) = sbar {
        if s.rows() != pool.len() || s.width() != record.spec.output_width() {
            return Err(Error::Shape {
                what: "distillation target rows",
                expected: pool.len(),
                found: s.rows(),
            });
        }
    }
    let w = train_local(
        &record.spec,
        &record.params,
        &record.bundle.train,
        sbar.map(|s| (pool, s)),
        config,
        record.id,
        round,
    )?;
    let logits = forward_logits(&record.spec, &w, pool.inputs()).map_err(|e| match e {
        Error::NonFinite { .. } => Error::Diverged {
            client: record.id,
            round,
            step: config.local_iters,
        },
        other => other,
    })?;
    Ok((w, logits))
}

/// `||grad Phi_k(w_k; sbar)||_2` over the full train split and the full public pool.
pub fn grad_norm_monitor(
    record: &ClientRecord,
    sbar: Option<&LogitMatrix>,
    pool: &PublicPool,
    lambda: f64,
) -> Result<f64> {
    grad_norm_at(
        &record.spec,
        &record.params,
        &record.bundle.train,
        sbar.map(|s| (pool, s)),
        lambda,
    )
}

pub(crate) fn grad_norm_at(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Dataset,
    distill: Option<(&PublicPool, &LogitMatrix)>,
    lambda: f64,
) -> Result<f64> {
    let distill = distill.map(|(pool, s)| DistillBatch {
        inputs: pool.inputs(),
        targets: s.values(),
    });
    Ok(grad_phi_stochastic(spec, params, &train.batch(), distill.as_ref(), lambda)?.norm())
}

/// Fraction of `data` rows whose arg-max prediction (lowest index on ties) equals the label.
pub fn accuracy(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let s = forward_logits(spec, params, data.inputs())?;
    let correct = (0..data.len())
        .filter(|&i| argmax(s.row(i)) == data.labels()[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Test accuracy of every active client's own model on its own test split.
pub fn evaluate_clients(clients: &[ClientRecord]) -> Result<Vec<(ClientId, f64)>> {
    clients
        .iter()
        .filter(|c| c.is_active())
        .map(|c| Ok((c.id, accuracy(&c.spec, &c.params, &c.bundle.test)?)))
        .collect()
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_acc: f64,
    pub std_acc: f64,
    /// Mean full-batch gradient norm over the clients trained this round.
    pub grad_norm: f64,
    pub uplink: u64,
    pub downlink: u64,
    #[serde(skip)]
    pub client_accuracy: Vec<(ClientId, f64)>,
    #[serde(skip)]
    pub client_grad_norms: Vec<(ClientId, f64)>,
}

impl RoundMetrics {
    pub(crate) fn new(
        round: usize,
        client_accuracy: Vec<(ClientId, f64)>,
        client_grad_norms: Vec<(ClientId, f64)>,
        ledger: &CommLedger,
    ) -> Self {
        let acc: Vec<f64> = client_accuracy.iter().map(|(_, a)| *a).collect();
        let (mean_acc, std_acc) = mean_std(&acc);
        let norms: Vec<f64> = client_grad_norms.iter().map(|(_, g)| *g).collect();
        Self {
            round,
            mean_acc,
            std_acc,
            grad_norm: mean_std(&norms).0,
            uplink: ledger.uplink_scalars,
            downlink: ledger.downlink_scalars,
            client_accuracy,
            client_grad_norms,
        }
    }
}
