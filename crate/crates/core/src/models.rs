//! Per-client predictors, the co-distillation objective and its gradient.
//!
//! Parameters live in one flat vector per client. Layouts (row-major):
//!
//! - `LinearRegressor(d)`: `w[d]`
//! - `SoftmaxLinear(d, N)`: `W[N×d] | b[N]`
//! - `Mlp(d, h, N)`: `W1[h×d] | b1[h] | W2[N×h] | b2[N]`, tanh hidden layer
//!
//! Classifiers emit softmax rows on the probability simplex. The regressor
//! emits its raw prediction as a width-1 "logit" so the linear-regression toy
//! runs through the same objective.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Arch {
    LinearRegressor {
        dim: usize,
    },
    SoftmaxLinear {
        dim: usize,
        classes: usize,
    },
    Mlp {
        dim: usize,
        hidden: usize,
        classes: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Arch,
    pub init_scale: f64,
}

impl ModelSpec {
    pub fn new(arch: Arch, init_scale: f64) -> Self {
        Self { arch, init_scale }
    }

    pub fn linear(dim: usize) -> Self {
        Self::new(Arch::LinearRegressor { dim }, 0.1)
    }

    pub fn softmax(dim: usize, classes: usize) -> Self {
        Self::new(Arch::SoftmaxLinear { dim, classes }, 0.1)
    }

    pub fn mlp(dim: usize, hidden: usize, classes: usize) -> Self {
        Self::new(
            Arch::Mlp {
                dim,
                hidden,
                classes,
            },
            0.1,
        )
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.arch {
            Arch::LinearRegressor { dim } => dim > 0,
            Arch::SoftmaxLinear { dim, classes } => dim > 0 && classes >= 2,
            Arch::Mlp {
                dim,
                hidden,
                classes,
            } => dim > 0 && hidden > 0 && classes >= 2,
        };
        if !ok {
            return Err(Error::config(format!(
                "invalid model dimensions {:?}",
                self.arch
            )));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.arch {
            Arch::LinearRegressor { dim }
            | Arch::SoftmaxLinear { dim, .. }
            | Arch::Mlp { dim, .. } => dim,
        }
    }

    /// Width of one output row: N for classifiers, 1 for the regressor.
    pub fn output_width(&self) -> usize {
        match self.arch {
            Arch::LinearRegressor { .. } => 1,
            Arch::SoftmaxLinear { classes, .. } | Arch::Mlp { classes, .. } => classes,
        }
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self.arch, Arch::LinearRegressor { .. })
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn arch_tag(&self) -> u32 {
        match self.arch {
            Arch::LinearRegressor { .. } => 1,
            Arch::SoftmaxLinear { .. } => 2,
            Arch::Mlp { .. } => 3,
        }
    }
}

pub fn param_count(spec: &ModelSpec) -> usize {
    match spec.arch {
        Arch::LinearRegressor { dim } => dim,
        Arch::SoftmaxLinear { dim, classes } => dim * classes + classes,
        Arch::Mlp {
            dim,
            hidden,
            classes,
        } => dim * hidden + hidden + hidden * classes + classes,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self(vec![0.0; spec.param_count()])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * grad`.
    pub fn step(&mut self, grad: &GradVector, lr: f64) {
        for (w, g) in self.0.iter_mut().zip(&grad.0) {
            *w -= lr * g;
        }
    }

    pub fn write_to<W: Write>(&self, spec: &ModelSpec, w: W) -> Result<()> {
        binfmt::write_values(w, spec.arch_tag(), &self.0)
    }

    /// Reads a checkpoint and checks it against `spec`.
    pub fn read_from<R: Read>(spec: &ModelSpec, r: R) -> Result<Self> {
        let (tag, values) = binfmt::read_values(r)?;
        if tag != spec.arch_tag() {
            return Err(Error::Format(format!(
                "arch tag {tag} does not match expected {}",
                spec.arch_tag()
            )));
        }
        if values.len() != spec.param_count() {
            return Err(Error::Shape {
                what: "checkpoint parameters",
                expected: spec.param_count(),
                found: values.len(),
            });
        }
        Ok(Self(values))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradVector(Vec<f64>);

impl GradVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Model outputs over a set of inputs, one row per input.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    width: usize,
    values: Vec<f64>,
}

impl LogitMatrix {
    pub fn new(rows: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * width {
            return Err(Error::Shape {
                what: "logit matrix",
                expected: rows * width,
                found: values.len(),
            });
        }
        Ok(Self {
            rows,
            width,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    /// Rows selected by `idx`, flattened.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            out.extend_from_slice(self.row(i));
        }
        out
    }

    pub fn is_on_simplex(&self, tol: f64) -> bool {
        self.values
            .chunks(self.width)
            .all(|r| r.iter().all(|&p| p >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    Values(&'a [f64]),
}

/// Labeled rows for the local loss. `inputs` is row-major.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a [f64],
    pub targets: Targets<'a>,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self.targets {
            Targets::Classes(y) => y.len(),
            Targets::Values(y) => y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Public rows paired with their distillation targets (one target row per input row).
#[derive(Debug, Clone, Copy)]
pub struct DistillBatch<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
}

/// Weights ~ Uniform(-init_scale, init_scale); biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seeded(seed);
    let s = spec.init_scale;
    let mut draw = |n: usize| -> Vec<f64> {
        if s > 0.0 {
            (0..n).map(|_| rng.random_range(-s..s)).collect()
        } else {
            vec![0.0; n]
        }
    };
    let values = match spec.arch {
        Arch::LinearRegressor { dim } => draw(dim),
        Arch::SoftmaxLinear { dim, classes } => {
            let mut v = draw(dim * classes);
            v.resize(dim * classes + classes, 0.0);
            v
        }
        Arch::Mlp {
            dim,
            hidden,
            classes,
        } => {
            let mut v = draw(dim * hidden);
            v.resize(dim * hidden + hidden, 0.0);
            v.extend(draw(hidden * classes));
            v.resize(param_count(spec), 0.0);
            v
        }
    };
    ParamVector(values)
}

/// Scratch buffers for one sample's forward/backward pass.
struct Workspace {
    hidden: Vec<f64>,
    scores: Vec<f64>,
    probs: Vec<f64>,
    dscores: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(spec: &ModelSpec) -> Self {
        let h = match spec.arch {
            Arch::Mlp { hidden, .. } => hidden,
            _ => 0,
        };
        let n = spec.output_width();
        Self {
            hidden: vec![0.0; h],
            scores: vec![0.0; n],
            probs: vec![0.0; n],
            dscores: vec![0.0; n],
            dhidden: vec![0.0; h],
        }
    }
}

fn affine(weights: &[f64], bias: Option<&[f64]>, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (o, out_o) in out.iter_mut().enumerate() {
        let row = &weights[o * d..(o + 1) * d];
        let mut acc = bias.map_or(0.0, |b| b[o]);
        for (w, xi) in row.iter().zip(x) {
            acc += w * xi;
        }
        *out_o = acc;
    }
}

fn scores_into(spec: &ModelSpec, w: &[f64], x: &[f64], ws: &mut Workspace) {
    match spec.arch {
        Arch::LinearRegressor { dim } => affine(&w[..dim], None, x, &mut ws.scores),
        Arch::SoftmaxLinear { dim, classes } => {
            let (wm, b) = w.split_at(dim * classes);
            affine(wm, Some(b), x, &mut ws.scores);
        }
        Arch::Mlp {
            dim,
            hidden,
            classes,
        } => {
            let (w1, rest) = w.split_at(dim * hidden);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(hidden * classes);
            affine(w1, Some(b1), x, &mut ws.hidden);
            ws.hidden.iter_mut().for_each(|h| *h = h.tanh());
            affine(w2, Some(b2), &ws.hidden, &mut ws.scores);
        }
    }
}

/// Max-shifted softmax. Returns the log-sum-exp of `scores`.
pub fn softmax_into(scores: &[f64], out: &mut [f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    max + sum.ln()
}

/// Accumulates d(loss)/d(params) given `ws.dscores` for input `x`.
fn backprop(spec: &ModelSpec, w: &[f64], x: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
    match spec.arch {
        Arch::LinearRegressor { dim } => {
            let g = ws.dscores[0];
            for (gi, xi) in grad[..dim].iter_mut().zip(x) {
                *gi += g * xi;
            }
        }
        Arch::SoftmaxLinear { dim, classes } => {
            let (gw, gb) = grad.split_at_mut(dim * classes);
            for (c, &g) in ws.dscores.iter().enumerate() {
                for (gi, xi) in gw[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                    *gi += g * xi;
                }
                gb[c] += g;
            }
        }
        Arch::Mlp {
            dim,
            hidden,
            classes,
        } => {
            let w2 = &w[dim * hidden + hidden..dim * hidden + hidden + hidden * classes];
            let (gw1, rest) = grad.split_at_mut(dim * hidden);
            let (gb1, rest) = rest.split_at_mut(hidden);
            let (gw2, gb2) = rest.split_at_mut(hidden * classes);
            ws.dhidden.iter_mut().for_each(|v| *v = 0.0);
            for (c, &g) in ws.dscores.iter().enumerate() {
                let row = &w2[c * hidden..(c + 1) * hidden];
                for j in 0..hidden {
                    gw2[c * hidden + j] += g * ws.hidden[j];
                    ws.dhidden[j] += g * row[j];
                }
                gb2[c] += g;
            }
            for j in 0..hidden {
                let da = ws.dhidden[j] * (1.0 - ws.hidden[j] * ws.hidden[j]);
                for (gi, xi) in gw1[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                    *gi += da * xi;
                }
                gb1[j] += da;
            }
        }
    }
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    if params.len() != spec.param_count() {
        return Err(Error::Shape {
            what: "parameters",
            expected: spec.param_count(),
            found: params.len(),
        });
    }
    Ok(())
}

fn check_inputs(spec: &ModelSpec, inputs: &[f64], rows: Option<usize>) -> Result<usize> {
    let d = spec.input_dim();
    if !inputs.len().is_multiple_of(d) {
        return Err(Error::Shape {
            what: "input width",
            expected: d,
            found: inputs.len() % d,
        });
    }
    let n = inputs.len() / d;
    if let Some(r) = rows {
        if r != n {
            return Err(Error::Shape {
                what: "batch rows",
                expected: n,
                found: r,
            });
        }
    }
    Ok(n)
}

fn check_batch(spec: &ModelSpec, batch: &Batch) -> Result<()> {
    check_inputs(spec, batch.inputs, Some(batch.len()))?;
    match (spec.is_classifier(), batch.targets) {
        (true, Targets::Classes(y)) => {
            let n = spec.output_width();
            if let Some(&bad) = y.iter().find(|&&c| c >= n) {
                return Err(Error::config(format!(
                    "label {bad} out of range for {n} classes"
                )));
            }
            Ok(())
        }
        (false, Targets::Values(_)) => Ok(()),
        _ => Err(Error::config("target kind does not match model kind")),
    }
}

fn check_distill(spec: &ModelSpec, distill: &DistillBatch) -> Result<usize> {
    let n = check_inputs(spec, distill.inputs, None)?;
    let expected = n * spec.output_width();
    if distill.targets.len() != expected {
        return Err(Error::Shape {
            what: "distillation targets",
            expected,
            found: distill.targets.len(),
        });
    }
    Ok(n)
}

/// Predictions `s(w, x)` for every row of `inputs`.
pub fn forward_logits(
    spec: &ModelSpec,
    params: &ParamVector,
    inputs: &[f64],
) -> Result<LogitMatrix> {
    check_params(spec, params)?;
    let n = check_inputs(spec, inputs, None)?;
    let d = spec.input_dim();
    let width = spec.output_width();
    let mut ws = Workspace::new(spec);
    let mut values = Vec::with_capacity(n * width);
    for i in 0..n {
        scores_into(
            spec,
            params.as_slice(),
            &inputs[i * d..(i + 1) * d],
            &mut ws,
        );
        if spec.is_classifier() {
            softmax_into(&ws.scores, &mut ws.probs);
            values.extend_from_slice(&ws.probs);
        } else {
            values.extend_from_slice(&ws.scores);
        }
        if values[i * width..].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "model output",
                index: i,
            });
        }
    }
    LogitMatrix::new(n, width, values)
}

/// Mean cross-entropy (classifiers) or sum of squared errors (regressor).
/// An empty batch contributes zero.
pub fn local_loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_params(spec, params)?;
    check_batch(spec, batch)?;
    let d = spec.input_dim();
    let mut ws = Workspace::new(spec);
    let w = params.as_slice();
    let mut total = 0.0;
    for i in 0..batch.len() {
        scores_into(spec, w, &batch.inputs[i * d..(i + 1) * d], &mut ws);
        match batch.targets {
            Targets::Classes(y) => {
                let lse = softmax_into(&ws.scores, &mut ws.probs);
                total += lse - ws.scores[y[i]];
            }
            Targets::Values(y) => {
                let r = ws.scores[0] - y[i];
                total += r * r;
            }
        }
    }
    Ok(match batch.targets {
        Targets::Classes(_) if !batch.is_empty() => total / batch.len() as f64,
        _ => total,
    })
}

fn distill_penalty(spec: &ModelSpec, params: &ParamVector, distill: &DistillBatch) -> Result<f64> {
    let n = check_distill(spec, distill)?;
    if n == 0 {
        return Ok(0.0);
    }
    let s = forward_logits(spec, params, distill.inputs)?;
    let sq: f64 = s
        .values()
        .iter()
        .zip(distill.targets)
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(sq / n as f64)
}

/// `F_k(train) + (lambda/|public|) * sum_x ||sbar(x) - s(w, x)||^2`.
pub fn objective_phi(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Batch,
    distill: Option<&DistillBatch>,
    lambda: f64,
) -> Result<f64> {
    let f = local_loss(spec, params, train)?;
    match distill {
        Some(db) if lambda != 0.0 => Ok(f + lambda * distill_penalty(spec, params, db)?),
        Some(db) => {
            check_distill(spec, db)?;
            Ok(f)
        }
        None => Ok(f),
    }
}

/// Exact gradient of [`objective_phi`] with respect to the parameters.
pub fn grad_phi_stochastic(
    spec: &ModelSpec,
    params: &ParamVector,
    train: &Batch,
    distill: Option<&DistillBatch>,
    lambda: f64,
) -> Result<GradVector> {
    check_params(spec, params)?;
    check_batch(spec, train)?;
    let d = spec.input_dim();
    let w = params.as_slice();
    let mut ws = Workspace::new(spec);
    let mut grad = vec![0.0; params.len()];

    let b = train.len();
    for i in 0..b {
        let x = &train.inputs[i * d..(i + 1) * d];
        scores_into(spec, w, x, &mut ws);
        match train.targets {
            Targets::Classes(y) => {
                softmax_into(&ws.scores, &mut ws.probs);
                let inv_b = 1.0 / b as f64;
                for (c, g) in ws.dscores.iter_mut().enumerate() {
                    let onehot = if c == y[i] { 1.0 } else { 0.0 };
                    *g = (ws.probs[c] - onehot) * inv_b;
                }
            }
            Targets::Values(y) => ws.dscores[0] = 2.0 * (ws.scores[0] - y[i]),
        }
        backprop(spec, w, x, &mut ws, &mut grad);
    }

    if let Some(db) = distill {
        let n = check_distill(spec, db)?;
        if lambda != 0.0 && n > 0 {
            let width = spec.output_width();
            let coef = 2.0 * lambda / n as f64;
            for i in 0..n {
                let x = &db.inputs[i * d..(i + 1) * d];
                let target = &db.targets[i * width..(i + 1) * width];
                scores_into(spec, w, x, &mut ws);
                if spec.is_classifier() {
                    softmax_into(&ws.scores, &mut ws.probs);
                    // dz = J_softmax^T v with v = coef * (s - sbar); J is symmetric.
                    let sv: f64 = ws
                        .probs
                        .iter()
                        .zip(target)
                        .map(|(p, t)| p * coef * (p - t))
                        .sum();
                    for ((ds, p), t) in ws.dscores.iter_mut().zip(&ws.probs).zip(target) {
                        *ds = p * (coef * (p - t) - sv);
                    }
                } else {
                    ws.dscores[0] = coef * (ws.scores[0] - target[0]);
                }
                backprop(spec, w, x, &mut ws, &mut grad);
            }
        }
    }

    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index: i,
        });
    }
    Ok(GradVector(grad))
}
