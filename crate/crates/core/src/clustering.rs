//! c-means (Lloyd) clustering of flattened logit matrices and nearest-centroid
//! selection.
//!
//! Seeding is k-means++. Inside Lloyd's loop a point keeps its current cluster
//! when that cluster is among the nearest ones; otherwise it moves to the
//! lowest-index nearest centroid. [`assign_nearest`] always breaks ties by the
//! lowest index.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::binfmt;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub type ClientId = usize;

pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-8;

/// Tag used for centroid dumps in the shared binary format.
pub const CENTROID_TAG: u32 = 16;

/// Uploaded logit matrices, flattened to `|P|·N` vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogitStack {
    entries: Vec<(ClientId, Vec<f64>)>,
}

impl LogitStack {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, client: ClientId, logits: Vec<f64>) -> Result<()> {
        if let Some((_, first)) = self.entries.first() {
            if first.len() != logits.len() {
                return Err(Error::Shape {
                    what: "logit stack entry",
                    expected: first.len(),
                    found: logits.len(),
                });
            }
        }
        self.entries.push((client, logits));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries.first().map_or(0, |(_, v)| v.len())
    }

    pub fn entries(&self) -> &[(ClientId, Vec<f64>)] {
        &self.entries
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.entries[i].1
    }

    pub fn client_ids(&self) -> Vec<ClientId> {
        self.entries.iter().map(|(c, _)| *c).collect()
    }
}

impl FromIterator<(ClientId, Vec<f64>)> for LogitStack {
    fn from_iter<T: IntoIterator<Item = (ClientId, Vec<f64>)>>(iter: T) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: Vec<Vec<f64>>,
    pub member_counts: Vec<usize>,
}

impl CentroidSet {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    /// Binary dump: values are `[c, dim, counts.., centroids..]` as f64.
    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut values = Vec::with_capacity(2 + self.len() * (1 + self.dim()));
        values.push(self.len() as f64);
        values.push(self.dim() as f64);
        values.extend(self.member_counts.iter().map(|&c| c as f64));
        for c in &self.centroids {
            values.extend_from_slice(c);
        }
        binfmt::write_values(w, CENTROID_TAG, &values)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let (tag, values) = binfmt::read_values(r)?;
        if tag != CENTROID_TAG {
            return Err(Error::Format(format!("tag {tag} is not a centroid dump")));
        }
        if values.len() < 2 {
            return Err(Error::Format("centroid dump too short".into()));
        }
        let (c, dim) = (values[0] as usize, values[1] as usize);
        if values.len() != 2 + c * (1 + dim) {
            return Err(Error::Format("centroid dump length mismatch".into()));
        }
        let member_counts = values[2..2 + c].iter().map(|&v| v as usize).collect();
        let centroids = values[2 + c..]
            .chunks(dim.max(1))
            .map(<[f64]>::to_vec)
            .collect();
        Ok(Self {
            centroids: if dim == 0 {
                vec![Vec::new(); c]
            } else {
                centroids
            },
            member_counts,
        })
    }
}

/// Cluster index per stack entry, aligned with the stack order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    pub clients: Vec<ClientId>,
    pub labels: Vec<usize>,
}

impl ClusterAssignment {
    pub fn members(&self, cluster: usize) -> Vec<ClientId> {
        self.clients
            .iter()
            .zip(&self.labels)
            .filter(|(_, &l)| l == cluster)
            .map(|(&c, _)| c)
            .collect()
    }

    /// Co-distillation weights induced by selecting `cluster`: `1/|members|` for
    /// every member, zero for everyone else.
    pub fn induced_weights(&self, cluster: usize) -> Vec<(ClientId, f64)> {
        let members = self.members(cluster);
        let w = 1.0 / members.len().max(1) as f64;
        self.clients
            .iter()
            .map(|&c| (c, if members.contains(&c) { w } else { 0.0 }))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CmeansFit {
    pub centroids: CentroidSet,
    pub assignment: ClusterAssignment,
    /// Objective after every assignment step, starting with the seeded centroids.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `argmin_i ||c_i - s||^2`, ties to the lowest index.
pub fn assign_nearest(logits: &[f64], centroids: &CentroidSet) -> usize {
    nearest(logits, &centroids.centroids).0
}

fn nearest(v: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = squared_distance(v, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// `sum_x ||x - c_assign(x)||^2`.
pub fn kmeans_objective(
    stack: &LogitStack,
    centroids: &CentroidSet,
    assignment: &ClusterAssignment,
) -> f64 {
    objective(stack, &centroids.centroids, &assignment.labels)
}

fn objective(stack: &LogitStack, centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| squared_distance(stack.vector(i), &centroids[l]))
        .sum()
}

fn kmeans_pp<R: Rng>(stack: &LogitStack, c: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let n = stack.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(stack.vector(i), stack.vector(chosen[0])))
        .collect();
    while chosen.len() < c {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // All remaining mass is zero: fall back to an unchosen index.
            Err(_) => {
                let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
                free[rng.random_range(0..free.len())]
            }
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_distance(stack.vector(i), stack.vector(next)));
        }
    }
    chosen.iter().map(|&i| stack.vector(i).to_vec()).collect()
}

fn assign_sticky(stack: &LogitStack, centroids: &[Vec<f64>], labels: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, label) in labels.iter_mut().enumerate() {
        let v = stack.vector(i);
        let (best, best_d) = nearest(v, centroids);
        let current = squared_distance(v, &centroids[*label]);
        if current > best_d && *label != best {
            *label = best;
            changed = true;
        }
    }
    changed
}

fn update_means(stack: &LogitStack, c: usize, labels: &[usize]) -> (Vec<Vec<f64>>, Vec<usize>) {
    let dim = stack.dim();
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(stack.vector(i)) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
    (sums, counts)
}

/// Moves every empty cluster onto the point farthest from its own centroid,
/// taken from a cluster that still has at least two members.
fn repair_empty(
    stack: &LogitStack,
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
    labels: &mut [usize],
) -> bool {
    let mut repaired = false;
    while let Some(empty) = counts.iter().position(|&n| n == 0) {
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i]] >= 2)
            .map(|i| (i, squared_distance(stack.vector(i), &centroids[labels[i]])))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        let Some((i, _)) = far else { break };
        counts[labels[i]] -= 1;
        labels[i] = empty;
        counts[empty] = 1;
        centroids[empty] = stack.vector(i).to_vec();
        repaired = true;
    }
    if repaired {
        let (means, n) = update_means(stack, centroids.len(), labels);
        centroids.clone_from_slice(&means);
        counts.copy_from_slice(&n);
    }
    repaired
}

/// Lloyd's iterations from k-means++ seeding.
///
/// Stops when assignments are stable, when the largest centroid shift is at
/// most `tol`, or after `max_iters` update steps.
pub fn cmeans_fit(
    stack: &LogitStack,
    c: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<CmeansFit> {
    if stack.is_empty() {
        return Err(Error::config("cannot cluster an empty logit stack"));
    }
    if c == 0 || c > stack.len() {
        return Err(Error::config(format!(
            "cluster count {c} must be in 1..={}",
            stack.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    let mut rng = seeded(seed);
    let mut centroids = kmeans_pp(stack, c, &mut rng);
    let mut labels: Vec<usize> = (0..stack.len())
        .map(|i| nearest(stack.vector(i), &centroids).0)
        .collect();
    let mut trace = vec![objective(stack, &centroids, &labels)];
    let mut iterations = 0;
    let mut counts;

    loop {
        let (means, n) = update_means(stack, c, &labels);
        let shift = means
            .iter()
            .zip(&centroids)
            .zip(&n)
            .filter(|(_, &k)| k > 0)
            .map(|((a, b), _)| squared_distance(a, b).sqrt())
            .fold(0.0, f64::max);
        for (dst, (src, &k)) in centroids.iter_mut().zip(means.iter().zip(&n)) {
            if k > 0 {
                dst.clone_from(src);
            }
        }
        counts = n;
        let repaired = repair_empty(stack, &mut centroids, &mut counts, &mut labels);
        iterations += 1;

        let changed = assign_sticky(stack, &centroids, &mut labels);
        trace.push(objective(stack, &centroids, &labels));
        if !changed && !repaired {
            break;
        }
        if shift <= tol && !repaired || iterations >= max_iters {
            if changed {
                let (means, n) = update_means(stack, c, &labels);
                counts = n;
                for (dst, (src, &k)) in centroids.iter_mut().zip(means.iter().zip(&counts)) {
                    if k > 0 {
                        dst.clone_from(src);
                    }
                }
                trace.push(objective(stack, &centroids, &labels));
            }
            break;
        }
    }

    let (_, counts_final) = update_means(stack, c, &labels);
    counts = counts_final;
    Ok(CmeansFit {
        centroids: CentroidSet {
            centroids,
            member_counts: counts,
        },
        assignment: ClusterAssignment {
            clients: stack.client_ids(),
            labels,
        },
        objective_trace: trace,
        iterations,
    })
}
