//! Personalized federated learning with clustered knowledge transfer.
//!
//! Clients train heterogeneous local models and exchange only soft predictions
//! ("logits") on a shared unlabeled public pool. The server clusters the
//! uploaded logit matrices with c-means and every selected client distills
//! toward the centroid nearest to its own predictions.
//!
//! Modules:
//! - [`data`]: synthetic blobs, Dirichlet non-IID partitioning, client splits, public pool.
//! - [`models`]: softmax / MLP / linear predictors, the co-distillation objective and its
//!   hand-derived gradient.
//! - [`clustering`]: Lloyd's c-means with k-means++ seeding and nearest-centroid selection.
//! - [`federation`]: the clustered co-distillation loop, FedAvg and local-only baselines,
//!   communication accounting.
//! - [`theory`]: Bayesian linear-regression model, closed-form regularization weights and a
//!   Monte-Carlo grid-search oracle; the three-client toy.
//! - [`experiment`]: builds client populations from a single master seed.

pub mod binfmt;
pub mod clustering;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod models;
pub mod par;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
