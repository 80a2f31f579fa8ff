//! Bayesian linear-regression model of co-distillation.
//!
//! Client `k` observes `y_k = X_k w_k + z` with `w_k = theta + zeta_k`,
//! `zeta_k ~ N(0, upsilon_k^2 I)`, `z ~ N(0, sigma^2 I)`, `X_kᵀX_k = beta I` and a
//! public design with `PᵀP = nu I`. The module provides the OLS estimates, the
//! co-distillation ridge minimizer, the exact Gaussian posterior of `w_k` given
//! every client's estimate, closed-form regularization weights, and a
//! Monte-Carlo grid-search oracle ([`oracle`]). [`toy`] holds the three-client
//! two-dimensional illustration.

pub mod oracle;
pub mod toy;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use oracle::{
    expected_loss_mc, grid_search_oracle, posterior_moments, run_theory_check, CheckOutcome,
    ClosedFormVariant, McMoments, OracleGrid, OracleResult, TaskReport, TheoryCheckConfig,
    TheoryReport, TheoryTaskConfig,
};
pub use toy::{
    run_toy_example, run_toy_with, toy_win_rates, write_toy_csv, ToyClient, ToyConfig, ToyReport,
    ToyWinRates,
};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng, Stream};

#[derive(Debug, Clone)]
pub struct BayesLinRegTask {
    pub d: usize,
    pub k: usize,
    pub sigma: f64,
    pub upsilon: Vec<f64>,
    pub beta: f64,
    pub nu: f64,
    pub n: usize,
    pub theta: DVector<f64>,
    pub true_w: Vec<DVector<f64>>,
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DVector<f64>>,
    /// `d × d`, orthonormal rows scaled by `sqrt(nu)`.
    pub p: DMatrix<f64>,
}

/// Bound of the uniform box the shared mean `theta` is drawn from.
pub const THETA_BOX: f64 = 10.0;

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn orthonormal_frame(rows: usize, cols: usize, rng: &mut SimRng) -> DMatrix<f64> {
    gaussian_matrix(rows, cols, rng).qr().q()
}

fn gaussian_vector(d: usize, scale: f64, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

#[allow(clippy::too_many_arguments)]
pub fn gen_task(
    d: usize,
    k: usize,
    sigma: f64,
    upsilon: &[f64],
    beta: f64,
    nu: f64,
    n: usize,
    seed: u64,
) -> Result<BayesLinRegTask> {
    if d == 0 || k == 0 {
        return Err(Error::config("dimension and client count must be positive"));
    }
    if upsilon.len() != k {
        return Err(Error::Shape {
            what: "upsilon",
            expected: k,
            found: upsilon.len(),
        });
    }
    if n < d {
        return Err(Error::config(format!(
            "n = {n} samples cannot identify d = {d} coefficients"
        )));
    }
    let positive = |v: f64| v > 0.0 && v.is_finite();
    if !positive(sigma) || !positive(beta) || !positive(nu) {
        return Err(Error::config("sigma, beta and nu must be positive"));
    }
    if upsilon.iter().any(|u| !(u.is_finite() && *u >= 0.0)) {
        return Err(Error::config(
            "upsilon entries must be finite and non-negative",
        ));
    }
    let mut rng = stream_rng(seed, Stream::Data, 0, 0);
    let theta = DVector::from_fn(d, |_, _| rng.random_range(-THETA_BOX..THETA_BOX));
    let mut true_w = Vec::with_capacity(k);
    let mut x = Vec::with_capacity(k);
    let mut y = Vec::with_capacity(k);
    for &u in upsilon {
        let w = &theta + gaussian_vector(d, u, &mut rng);
        let xk = orthonormal_frame(n, d, &mut rng) * beta.sqrt();
        let yk = &xk * &w + gaussian_vector(n, sigma, &mut rng);
        true_w.push(w);
        x.push(xk);
        y.push(yk);
    }
    let p = orthonormal_frame(d, d, &mut rng) * nu.sqrt();
    Ok(BayesLinRegTask {
        d,
        k,
        sigma,
        upsilon: upsilon.to_vec(),
        beta,
        nu,
        n,
        theta,
        true_w,
        x,
        y,
        p,
    })
}

impl BayesLinRegTask {
    pub fn gram(&self, k: usize) -> DMatrix<f64> {
        self.x[k].transpose() * &self.x[k]
    }

    pub fn public_gram(&self) -> DMatrix<f64> {
        self.p.transpose() * &self.p
    }

    pub fn all_ols(&self) -> Result<Vec<DVector<f64>>> {
        (0..self.k).map(|i| ols_estimate(self, i)).collect()
    }

    fn check_client(&self, k: usize) -> Result<()> {
        if k >= self.k {
            return Err(Error::config(format!(
                "client {k} out of range 0..{}",
                self.k
            )));
        }
        Ok(())
    }
}

/// Solves `a x = b`, rejecting `a` whose smallest singular value is below
/// `1e-12 · scale` (`scale` defaults to the largest singular value).
fn solve_checked(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    scale: Option<f64>,
    what: &str,
) -> Result<DVector<f64>> {
    let svd = a.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let floor = 1e-12 * scale.unwrap_or(max).max(f64::MIN_POSITIVE);
    if min.is_nan() || min <= floor {
        return Err(Error::Singular(format!(
            "{what}: singular values span [{min:e}, {max:e}]"
        )));
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what}: LU solve failed")))
}

fn inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    a.clone()
        .try_inverse()
        .ok_or_else(|| Error::Singular(format!("{what} is not invertible")))
}

/// `(X_kᵀX_k)^{-1} X_kᵀ y_k`.
pub fn ols_estimate(task: &BayesLinRegTask, k: usize) -> Result<DVector<f64>> {
    task.check_client(k)?;
    let xt = task.x[k].transpose();
    solve_checked(
        &(&xt * &task.x[k]),
        &(&xt * &task.y[k]),
        None,
        "design Gram matrix",
    )
}

/// Minimizer of `||X w - y||^2 + lambda ||P w - P target||^2` written in terms
/// of Gram matrices: `(G + lambda H)^{-1} (G w_own + lambda H target)`.
pub fn codistill_solve(
    gram: &DMatrix<f64>,
    public_gram: &DMatrix<f64>,
    lambda: f64,
    w_own: &DVector<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    if lambda.is_nan() {
        return Err(Error::Domain("lambda is NaN".into()));
    }
    let a = gram + public_gram * lambda;
    let b = gram * w_own + public_gram * target * lambda;
    let scale = gram.norm() + lambda.abs() * public_gram.norm();
    solve_checked(&a, &b, Some(scale), "co-distillation system")
}

/// `sum_i alpha_i w_i`.
pub fn mix(alpha: &[f64], all_what: &[DVector<f64>]) -> Result<DVector<f64>> {
    if alpha.len() != all_what.len() || all_what.is_empty() {
        return Err(Error::Shape {
            what: "mixing weights",
            expected: all_what.len(),
            found: alpha.len(),
        });
    }
    let mut out = DVector::zeros(all_what[0].len());
    for (a, w) in alpha.iter().zip(all_what) {
        out += w * *a;
    }
    Ok(out)
}

/// General-matrix solve of the client-`k` co-distillation minimizer.
pub fn ridge_codistill_minimizer(
    task: &BayesLinRegTask,
    k: usize,
    lambda: f64,
    alpha: &[f64],
    all_what: &[DVector<f64>],
) -> Result<DVector<f64>> {
    task.check_client(k)?;
    let target = mix(alpha, all_what)?;
    codistill_solve(
        &task.gram(k),
        &task.public_gram(),
        lambda,
        &all_what[k],
        &target,
    )
}

/// Scalar-mixing form valid when `X_kᵀX_k = beta I` and `PᵀP = nu I`:
/// `w_own / (1 + lambda nu / beta) + target / (1 + beta / (lambda nu))`.
pub fn ridge_codistill_scalar(
    task: &BayesLinRegTask,
    k: usize,
    lambda: f64,
    alpha: &[f64],
    all_what: &[DVector<f64>],
) -> Result<DVector<f64>> {
    task.check_client(k)?;
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Domain(format!(
            "scalar mixing needs lambda >= 0, got {lambda}"
        )));
    }
    let target = mix(alpha, all_what)?;
    let r = lambda * task.nu / task.beta;
    Ok(&all_what[k] / (1.0 + r) + target * (r / (1.0 + r)))
}

/// `A_k = (sum_{i != k} 1 / (sigma^2 + beta upsilon_i^2))^{-1}`.
pub fn a_k(task: &BayesLinRegTask, k: usize) -> Result<f64> {
    task.check_client(k)?;
    if task.k < 2 {
        return Err(Error::Domain(
            "at least two clients are needed to borrow strength".into(),
        ));
    }
    let s2 = task.sigma * task.sigma;
    let sum: f64 = (0..task.k)
        .filter(|&i| i != k)
        .map(|i| 1.0 / (s2 + task.beta * task.upsilon[i].powi(2)))
        .sum();
    Ok(1.0 / sum)
}

/// Gaussian posterior of `w_k` given every client's OLS estimate, under a flat
/// prior on `theta`.
#[derive(Debug, Clone)]
pub struct BayesPosterior {
    /// Mean from the general matrix recursion.
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Mean from the isotropic scalar form.
    pub scalar_mean: DVector<f64>,
    /// Posterior variance per coordinate in the isotropic case.
    pub cov_scalar: f64,
    /// Coefficient on the client's own estimate in the scalar form.
    pub own_coef: f64,
    /// `theta` estimate from the other clients, `A_k sum_{i != k} w_i / (sigma^2 + beta upsilon_i^2)`.
    pub pooled_mean: DVector<f64>,
}

/// Posterior mean and covariance of `w_k`.
///
/// Matrix path: `Sigma_i = sigma^2 (X_iᵀX_i)^{-1} + upsilon_i^2 I`; the other
/// clients pool to `theta ~ N(theta_bar, Sigma_bar)` with
/// `Sigma_bar = (sum_{i != k} Sigma_i^{-1})^{-1}`; the prior on `w_k` is then
/// `N(theta_bar, Sigma_bar + upsilon_k^2 I)` and the client's own estimate adds
/// precision `X_kᵀX_k / sigma^2`.
///
/// Scalar path: with `S = A_k + beta upsilon_k^2` the mean is
/// `w_k_hat / (1 + sigma^2 / S) + theta_bar · sigma^2 / (sigma^2 + S)` and the
/// variance is `(beta / S + beta / sigma^2)^{-1}`.
pub fn bayes_optimal_wk(
    task: &BayesLinRegTask,
    k: usize,
    all_what: &[DVector<f64>],
) -> Result<BayesPosterior> {
    task.check_client(k)?;
    if all_what.len() != task.k {
        return Err(Error::Shape {
            what: "client estimates",
            expected: task.k,
            found: all_what.len(),
        });
    }
    let d = task.d;
    let s2 = task.sigma * task.sigma;
    let eye = DMatrix::<f64>::identity(d, d);

    let mut pooled_precision = DMatrix::<f64>::zeros(d, d);
    let mut weighted = DVector::<f64>::zeros(d);
    for i in (0..task.k).filter(|&i| i != k) {
        let sigma_i =
            inverse(&task.gram(i), "design Gram matrix")? * s2 + &eye * task.upsilon[i].powi(2);
        let prec_i = inverse(&sigma_i, "client covariance")?;
        weighted += &prec_i * &all_what[i];
        pooled_precision += prec_i;
    }
    let sigma_bar = inverse(&pooled_precision, "pooled precision")?;
    let theta_bar = &sigma_bar * weighted;
    let sigma_tilde = &sigma_bar + &eye * task.upsilon[k].powi(2);
    let prior_prec = inverse(&sigma_tilde, "prior covariance")?;
    let like_prec = task.gram(k) / s2;
    let cov = inverse(&(&prior_prec + &like_prec), "posterior precision")?;
    let mean = &cov * (&prior_prec * &theta_bar + &like_prec * &all_what[k]);

    let a = a_k(task, k)?;
    let pooled_mean = (0..task.k)
        .filter(|&i| i != k)
        .fold(DVector::zeros(d), |acc, i| {
            acc + &all_what[i] * (a / (s2 + task.beta * task.upsilon[i].powi(2)))
        });
    let s = a + task.beta * task.upsilon[k].powi(2);
    let own_coef = 1.0 / (1.0 + s2 / s);
    let scalar_mean = &all_what[k] * own_coef + &pooled_mean * (s2 / (s2 + s));
    let cov_scalar = 1.0 / (task.beta / s + task.beta / s2);

    Ok(BayesPosterior {
        mean,
        cov,
        scalar_mean,
        cov_scalar,
        own_coef,
        pooled_mean,
    })
}

/// Regularization weight and mixing weights for client `k`; `alpha_star[k]` is 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedForm {
    pub lambda_star: f64,
    pub alpha_star: Vec<f64>,
    pub a_k: f64,
    pub b_k: f64,
}

impl ClosedForm {
    pub fn alpha_sum(&self) -> f64 {
        self.alpha_star.iter().sum()
    }

    /// `alpha_star` rescaled to sum to one.
    pub fn projected_alpha(&self) -> Vec<f64> {
        let s = self.alpha_sum();
        self.alpha_star.iter().map(|a| a / s).collect()
    }
}

/// `lambda* = sigma^2 / (upsilon_k^2 nu)` and
/// `alpha*_i = B_k / (sigma^2 + beta upsilon_i^2)` for `i != k`, with
/// `B_k = A_k (sigma^2 + beta upsilon_k^2) / (sigma^2 + A_k beta upsilon_k^2)`.
pub fn closed_form_lambda_alpha(task: &BayesLinRegTask, k: usize) -> Result<ClosedForm> {
    task.check_client(k)?;
    let u2 = task.upsilon[k].powi(2);
    if u2 == 0.0 {
        return Err(Error::Domain(format!(
            "upsilon_{k} = 0 leaves lambda* undefined"
        )));
    }
    let s2 = task.sigma * task.sigma;
    let a = a_k(task, k)?;
    let b = a * (s2 + task.beta * u2) / (s2 + a * task.beta * u2);
    let alpha_star = (0..task.k)
        .map(|i| {
            if i == k {
                0.0
            } else {
                b / (s2 + task.beta * task.upsilon[i].powi(2))
            }
        })
        .collect();
    Ok(ClosedForm {
        lambda_star: s2 / (u2 * task.nu),
        alpha_star,
        a_k: a,
        b_k: b,
    })
}

/// Weights for which the ridge minimizer equals the posterior mean:
/// `lambda = beta sigma^2 / (nu (A_k + beta upsilon_k^2))` and
/// `alpha_i = A_k / (sigma^2 + beta upsilon_i^2)` for `i != k`. These alphas sum
/// to one; `b_k` is reported as `A_k`.
pub fn posterior_matched_lambda_alpha(task: &BayesLinRegTask, k: usize) -> Result<ClosedForm> {
    task.check_client(k)?;
    let s2 = task.sigma * task.sigma;
    let a = a_k(task, k)?;
    let s = a + task.beta * task.upsilon[k].powi(2);
    let alpha_star = (0..task.k)
        .map(|i| {
            if i == k {
                0.0
            } else {
                a / (s2 + task.beta * task.upsilon[i].powi(2))
            }
        })
        .collect();
    Ok(ClosedForm {
        lambda_star: task.beta * s2 / (task.nu * s),
        alpha_star,
        a_k: a,
        b_k: a,
    })
}
