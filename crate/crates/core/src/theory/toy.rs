//! Three two-dimensional linear clients: two similar, one far off.
//!
//! Every client shares one design matrix and one public design; labels are
//! noiseless, so each client's own least-squares fit equals its true model.
//! Objectives use mean losses: `(1/n)||Xw - y||^2 + (lambda/|P|)||Pw - P target||^2`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{codistill_solve, mix};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Standard deviation of each client's deviation from the shared mean.
    pub sigmas: [f64; 3],
    pub lambda: f64,
    pub samples: usize,
    pub public_samples: usize,
    /// Inputs and the shared mean are uniform on `[-range, range]`.
    pub range: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            sigmas: [2.0, 5.0, 200.0],
            lambda: 50.0,
            samples: 20,
            public_samples: 20,
            range: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyClient {
    pub client: usize,
    pub true_w: Vec<f64>,
    pub fedavg: Vec<f64>,
    pub clustered: Vec<f64>,
    pub uniform: Vec<f64>,
    pub dist_fedavg: f64,
    pub dist_clustered: f64,
    pub dist_uniform: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToyReport {
    pub seed: u64,
    pub theta: Vec<f64>,
    pub clients: Vec<ToyClient>,
}

/// Clients 0 and 1 distill toward each other's mean; client 2 keeps itself.
pub const CLUSTERED_ALPHA: [[f64; 3]; 3] = [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0]];
pub const UNIFORM_ALPHA: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

pub fn run_toy_example(seed: u64) -> Result<ToyReport> {
    run_toy_with(&ToyConfig::default(), seed)
}

pub fn run_toy_with(cfg: &ToyConfig, seed: u64) -> Result<ToyReport> {
    if cfg.samples < 2 || cfg.public_samples < 2 {
        return Err(Error::config(
            "toy needs at least two private and two public samples",
        ));
    }
    let negative = |x: f64| x.is_nan() || x < 0.0;
    if negative(cfg.lambda)
        || cfg.sigmas.iter().any(|&s| negative(s))
        || cfg.range.is_nan()
        || cfg.range <= 0.0
    {
        return Err(Error::config(
            "toy lambda, sigmas and range must be non-negative",
        ));
    }
    let d = 2;
    let mut rng = stream_rng(seed, Stream::Data, 0, 0);
    let r = cfg.range;
    let theta = DVector::from_fn(d, |_, _| rng.random_range(-r..r));
    let true_w: Vec<DVector<f64>> = cfg
        .sigmas
        .iter()
        .map(|&s| {
            let n = Normal::new(0.0, s).expect("finite non-negative std");
            &theta + DVector::from_fn(d, |_, _| n.sample(&mut rng))
        })
        .collect();
    let x = DMatrix::from_fn(cfg.samples, d, |_, _| rng.random_range(-r..r));
    let p = DMatrix::from_fn(cfg.public_samples, d, |_, _| rng.random_range(-r..r));
    let gram = x.transpose() * &x / cfg.samples as f64;
    let pgram = p.transpose() * &p / cfg.public_samples as f64;

    // Noiseless labels make every local fit exact, and pooled least squares on a
    // shared design is the average of the client models.
    let what = true_w.clone();
    let fedavg = mix(&UNIFORM_ALPHA, &what)?;

    let mut clients = Vec::with_capacity(3);
    for k in 0..3 {
        let clustered_target = mix(&CLUSTERED_ALPHA[k], &what)?;
        let uniform_target = mix(&UNIFORM_ALPHA, &what)?;
        let clustered = codistill_solve(&gram, &pgram, cfg.lambda, &what[k], &clustered_target)?;
        let uniform = codistill_solve(&gram, &pgram, cfg.lambda, &what[k], &uniform_target)?;
        let dist = |v: &DVector<f64>| (v - &true_w[k]).norm();
        clients.push(ToyClient {
            client: k,
            true_w: true_w[k].iter().copied().collect(),
            fedavg: fedavg.iter().copied().collect(),
            dist_fedavg: dist(&fedavg),
            dist_clustered: dist(&clustered),
            dist_uniform: dist(&uniform),
            clustered: clustered.iter().copied().collect(),
            uniform: uniform.iter().copied().collect(),
        });
    }
    Ok(ToyReport {
        seed,
        theta: theta.iter().copied().collect(),
        clients,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ToyWinRates {
    pub seeds: usize,
    /// Seeds where the clustered solution is strictly closer to the truth, for clients 0 and 1.
    pub clustered_beats_uniform: [usize; 2],
    /// Seeds where the uniform solution is strictly closer than FedAvg for client 2.
    pub uniform_beats_fedavg_far_client: usize,
}

pub fn toy_win_rates(reports: &[ToyReport]) -> ToyWinRates {
    let mut cb = [0; 2];
    let mut uf = 0;
    for r in reports {
        for (k, slot) in cb.iter_mut().enumerate() {
            let c = &r.clients[k];
            *slot += (c.dist_clustered < c.dist_uniform) as usize;
        }
        let c = &r.clients[2];
        uf += (c.dist_uniform < c.dist_fedavg) as usize;
    }
    ToyWinRates {
        seeds: reports.len(),
        clustered_beats_uniform: cb,
        uniform_beats_fedavg_far_client: uf,
    }
}

/// Long-format CSV: one row per (seed, client, model).
pub fn write_toy_csv<W: Write>(w: W, reports: &[ToyReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["seed", "client", "model", "w0", "w1", "distance"])?;
    for r in reports {
        for c in &r.clients {
            let rows: [(&str, &[f64], f64); 4] = [
                ("true", &c.true_w, 0.0),
                ("fedavg", &c.fedavg, c.dist_fedavg),
                ("clustered", &c.clustered, c.dist_clustered),
                ("uniform", &c.uniform, c.dist_uniform),
            ];
            for (model, w, dist) in rows {
                out.write_record([
                    r.seed.to_string(),
                    c.client.to_string(),
                    model.to_string(),
                    w[0].to_string(),
                    w[1].to_string(),
                    dist.to_string(),
                ])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{
        grad_phi_stochastic, objective_phi, Batch, DistillBatch, ModelSpec, ParamVector, Targets,
    };

    #[test]
    fn no_heterogeneity_collapses_everything() {
        let cfg = ToyConfig {
            sigmas: [0.0; 3],
            ..Default::default()
        };
        let r = run_toy_with(&cfg, 3).unwrap();
        for c in &r.clients {
            for v in [&c.true_w, &c.fedavg, &c.clustered, &c.uniform] {
                for (a, b) in v.iter().zip(&r.theta) {
                    assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn fedavg_is_a_convex_combination_of_true_models() {
        for seed in 0..10 {
            let r = run_toy_example(seed).unwrap();
            for j in 0..2 {
                let lo = r
                    .clients
                    .iter()
                    .map(|c| c.true_w[j])
                    .fold(f64::INFINITY, f64::min);
                let hi = r
                    .clients
                    .iter()
                    .map(|c| c.true_w[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                let f = r.clients[0].fedavg[j];
                assert!(lo <= f && f <= hi);
            }
        }
    }

    #[test]
    fn clustering_wins_for_similar_clients() {
        let reports: Vec<ToyReport> = (0..10).map(|s| run_toy_example(s).unwrap()).collect();
        let w = toy_win_rates(&reports);
        assert!(w.clustered_beats_uniform.iter().all(|&c| c >= 9), "{w:?}");
        assert!(w.uniform_beats_fedavg_far_client > 5, "{w:?}");
    }

    #[test]
    fn csv_has_one_row_per_seed_client_model() {
        let reports: Vec<ToyReport> = (0..10).map(|s| run_toy_example(s).unwrap()).collect();
        let mut buf = Vec::new();
        write_toy_csv(&mut buf, &reports).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 120);
    }

    #[test]
    fn linear_solve_matches_gradient_descent_through_model_pipeline() {
        // Same problem as a LinearRegressor trained on the co-distillation
        // objective: sum-of-squares loss, so the regularizer weight is lambda·n.
        let cfg = ToyConfig::default();
        let n = cfg.samples;
        let mut rng = stream_rng(77, Stream::Data, 0, 0);
        let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pub_x: Vec<f64> = (0..2 * cfg.public_samples)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w_own = DVector::from_vec(vec![1.5, -0.5]);
        let target = DVector::from_vec(vec![-2.0, 3.0]);
        let xm = DMatrix::from_row_slice(n, 2, &x);
        let pm = DMatrix::from_row_slice(cfg.public_samples, 2, &pub_x);
        let y: Vec<f64> = (&xm * &w_own).iter().copied().collect();
        let sbar: Vec<f64> = (&pm * &target).iter().copied().collect();
        let lambda = 0.8;
        let solved = codistill_solve(
            &(xm.transpose() * &xm / n as f64),
            &(pm.transpose() * &pm / cfg.public_samples as f64),
            lambda,
            &w_own,
            &target,
        )
        .unwrap();

        let spec = ModelSpec::linear(2);
        let batch = Batch {
            inputs: &x,
            targets: Targets::Values(&y),
        };
        let distill = DistillBatch {
            inputs: &pub_x,
            targets: &sbar,
        };
        let lam = lambda * n as f64;
        let mut w = ParamVector::zeros(&spec);
        let mut last = objective_phi(&spec, &w, &batch, Some(&distill), lam).unwrap();
        for _ in 0..20_000 {
            let g = grad_phi_stochastic(&spec, &w, &batch, Some(&distill), lam).unwrap();
            w.step(&g, 0.01);
            let now = objective_phi(&spec, &w, &batch, Some(&distill), lam).unwrap();
            assert!(now <= last + 1e-9);
            last = now;
        }
        for j in 0..2 {
            assert!(
                (w.as_slice()[j] - solved[j]).abs() < 1e-8,
                "{:?} vs {solved}",
                w.as_slice()
            );
        }
    }
}
