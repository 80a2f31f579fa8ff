//! Synthetic datasets, Dirichlet non-IID partitioning, per-client splits and
//! the shared unlabeled public pool.

use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::{Batch, Targets};
use crate::rng::{seeded, stream_rng, Stream};

/// Labeled feature rows, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    num_classes: usize,
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        dim: usize,
        num_classes: usize,
        inputs: Vec<f64>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if dim == 0 || num_classes == 0 {
            return Err(Error::config(
                "dataset needs dim >= 1 and at least one class",
            ));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::Shape {
                what: "dataset inputs",
                expected: labels.len() * dim,
                found: inputs.len(),
            });
        }
        if let Some(i) = labels.iter().position(|&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {} at row {i} is out of range for {num_classes} classes",
                labels[i]
            )));
        }
        if let Some(i) = inputs.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "dataset inputs",
                index: i / dim,
            });
        }
        Ok(Self {
            dim,
            num_classes,
            inputs,
            labels,
        })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self {
            dim,
            num_classes,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(idx.len() * self.dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            dim: self.dim,
            num_classes: self.num_classes,
            inputs,
            labels,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            inputs: &self.inputs,
            targets: Targets::Classes(&self.labels),
        }
    }

    /// Columnar CSV with header `f0,..,f{d-1},label`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim).map(|j| format!("f{j}")).collect();
        header.push("label".into());
        out.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, num_classes: usize) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(r);
        let dim = rdr.headers()?.len().saturating_sub(1);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for j in 0..dim {
                inputs.push(
                    rec[j]
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("feature f{j}: {e}")))?,
                );
            }
            labels.push(
                rec[dim]
                    .parse::<usize>()
                    .map_err(|e| Error::Format(format!("label: {e}")))?,
            );
        }
        Dataset::new(dim, num_classes, inputs, labels)
    }
}

/// Isotropic Gaussian blobs, one mean per class.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    dim: usize,
    means: Vec<Vec<f64>>,
}

impl BlobGenerator {
    /// Class means are drawn uniformly on the sphere of radius `separation`.
    pub fn new(num_classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if dim < 2 {
            return Err(Error::config("dim must be at least 2"));
        }
        if !(separation > 0.0 && separation.is_finite()) {
            return Err(Error::config("class_separation must be positive"));
        }
        let mut rng = seeded(seed);
        let means = (0..num_classes)
            .map(|_| {
                let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt()
                    .max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x *= separation / norm);
                v
            })
            .collect();
        Ok(Self { dim, means })
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// Same blobs translated by `offset` along the all-ones direction.
    pub fn shifted(&self, offset: f64) -> Self {
        let step = offset / (self.dim as f64).sqrt();
        Self {
            dim: self.dim,
            means: self
                .means
                .iter()
                .map(|m| m.iter().map(|x| x + step).collect())
                .collect(),
        }
    }

    /// `samples_per_class` unit-covariance draws per class, class-major order.
    pub fn sample(&self, samples_per_class: usize, seed: u64) -> Result<Dataset> {
        if samples_per_class == 0 {
            return Err(Error::config("samples_per_class must be positive"));
        }
        let mut rng = seeded(seed);
        let n = samples_per_class * self.means.len();
        let mut inputs = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (c, mean) in self.means.iter().enumerate() {
            for _ in 0..samples_per_class {
                for &m in mean {
                    let z: f64 = rng.sample(StandardNormal);
                    inputs.push(m + z);
                }
                labels.push(c);
            }
        }
        Dataset::new(self.dim, self.means.len(), inputs, labels)
    }
}

pub fn generate_synthetic_classification(
    num_classes: usize,
    dim: usize,
    samples_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    let gen = BlobGenerator::new(
        num_classes,
        dim,
        class_separation,
        crate::rng::derive_seed(seed, Stream::Data, 0, 0),
    )?;
    gen.sample(
        samples_per_class,
        crate::rng::derive_seed(seed, Stream::Data, 1, 0),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("Dirichlet alpha must be positive"));
        }
        Ok(())
    }
}

/// One draw from the symmetric Dirichlet `Dir_k(alpha)` via normalized Gamma variates.
///
/// For very small `alpha` every Gamma draw can underflow to zero; the draw then
/// degenerates to a uniformly chosen vertex of the simplex.
pub fn sample_dirichlet<R: Rng + ?Sized>(k: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let mut x: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = x.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        x.iter_mut().for_each(|v| *v /= sum);
    } else {
        x.iter_mut().for_each(|v| *v = 0.0);
        x[rng.random_range(0..k)] = 1.0;
    }
    x
}

/// Splits every class among the clients by an independent `Dir_K(alpha)` draw.
///
/// Empty shards are allowed. The union of the shards is exactly the input.
pub fn partition_dirichlet(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    partition_dirichlet_grouped(data, spec, 1)
}

/// Dirichlet partition restricted to label groups.
///
/// Labels and clients are each cut into `groups` contiguous blocks; samples of a
/// class in label block `g` are only distributed among the clients of block `g`.
/// `groups == 1` is the plain Dirichlet partition.
pub fn partition_dirichlet_grouped(
    data: &Dataset,
    spec: &PartitionSpec,
    groups: usize,
) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if groups == 0 || groups > spec.num_clients || groups > data.num_classes() {
        return Err(Error::config(format!(
            "label_groups must be in 1..=min(num_clients, num_classes), got {groups}"
        )));
    }
    let k = spec.num_clients;
    let n_classes = data.num_classes();
    let client_block = |g: usize| (g * k / groups)..((g + 1) * k / groups);
    let class_group = |c: usize| c * groups / n_classes;

    let mut rng = stream_rng(spec.seed, Stream::Partition, 0, 0);
    let mut per_client: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &y) in data.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, mut idx) in by_class.into_iter().enumerate() {
        let clients = client_block(class_group(c));
        let props = sample_dirichlet(clients.len(), spec.alpha, &mut rng);
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (j, client) in clients.clone().enumerate() {
            let end = if j + 1 == props.len() {
                n
            } else {
                cum += props[j];
                ((cum * n as f64).floor() as usize).clamp(start, n)
            };
            per_client[client].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(per_client.iter().map(|idx| data.subset(idx)).collect())
}

/// Candidate train fractions, as integer percentages.
pub const TRAIN_PERCENTS: [usize; 3] = [10, 30, 40];
pub const VAL_PERCENT: usize = 10;
pub const TEST_PERCENT: usize = 50;

/// What happens to the samples left over when the train fraction is below 0.4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Leftover {
    #[default]
    FoldIntoTest,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Floor-rounded split sizes; leftovers go to test under [`Leftover::FoldIntoTest`].
pub fn split_sizes(n: usize, train_percent: usize, leftover: Leftover) -> SplitSizes {
    let train = n * train_percent / 100;
    let val = n * VAL_PERCENT / 100;
    let test = match leftover {
        Leftover::FoldIntoTest => n - train - val,
        Leftover::Discard => n * TEST_PERCENT / 100,
    };
    SplitSizes { train, val, test }
}

#[derive(Debug, Clone)]
pub struct ClientDataBundle {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub train_percent: usize,
    /// Fraction of all active training data held by this client; 0 when inactive.
    pub p_k: f64,
    /// False when the shard is too small to give every split a sample.
    pub active: bool,
}

pub fn split_train_val_test(
    shard: &Dataset,
    train_percent: usize,
    leftover: Leftover,
    seed: u64,
) -> ClientDataBundle {
    let sizes = split_sizes(shard.len(), train_percent, leftover);
    let mut idx: Vec<usize> = (0..shard.len()).collect();
    idx.shuffle(&mut seeded(seed));
    let (train, rest) = idx.split_at(sizes.train);
    let (val, rest) = rest.split_at(sizes.val);
    let test = &rest[..sizes.test];
    ClientDataBundle {
        train: shard.subset(train),
        val: shard.subset(val),
        test: shard.subset(test),
        train_percent,
        p_k: 0.0,
        active: sizes.train >= 1 && sizes.val >= 1 && sizes.test >= 1,
    }
}

/// Splits every shard and normalizes `p_k` over the active clients.
///
/// Train fractions are drawn from the partition stream in client-index order.
pub fn split_clients(shards: &[Dataset], leftover: Leftover, seed: u64) -> Vec<ClientDataBundle> {
    let mut frac_rng = stream_rng(seed, Stream::Partition, 1, 0);
    let mut bundles: Vec<ClientDataBundle> = shards
        .iter()
        .enumerate()
        .map(|(k, shard)| {
            let pct = TRAIN_PERCENTS[frac_rng.random_range(0..TRAIN_PERCENTS.len())];
            let split_seed = crate::rng::derive_seed(seed, Stream::Split, k as u64, 0);
            split_train_val_test(shard, pct, leftover, split_seed)
        })
        .collect();
    normalize_shares(&mut bundles);
    bundles
}

pub fn normalize_shares(bundles: &mut [ClientDataBundle]) {
    let total: usize = bundles
        .iter()
        .filter(|b| b.active)
        .map(|b| b.train.len())
        .sum();
    for b in bundles.iter_mut() {
        b.p_k = if b.active && total > 0 {
            b.train.len() as f64 / total as f64
        } else {
            0.0
        };
    }
}

/// Shared unlabeled inputs every client predicts on.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicPool {
    dim: usize,
    inputs: Vec<f64>,
}

impl PublicPool {
    pub fn new(dim: usize, inputs: Vec<f64>) -> Result<Self> {
        if dim == 0 || inputs.is_empty() || !inputs.len().is_multiple_of(dim) {
            return Err(Error::config(
                "public pool needs at least one row of width dim",
            ));
        }
        Ok(Self { dim, inputs })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn rows(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            out.extend_from_slice(&self.inputs[i * self.dim..(i + 1) * self.dim]);
        }
        out
    }
}

/// Uniform sample of `size` rows without replacement; labels are dropped.
pub fn draw_public_pool(source: &Dataset, size: usize, seed: u64) -> Result<PublicPool> {
    if size == 0 || size > source.len() {
        return Err(Error::config(format!(
            "public pool size {size} must be in 1..={}",
            source.len()
        )));
    }
    let idx = index::sample(&mut seeded(seed), source.len(), size).into_vec();
    PublicPool::new(source.dim(), source.subset(&idx).inputs)
}

/// Mini-batch indices into a collection of `n` items.
///
/// Without replacement when `batch <= n`; otherwise every index once (shuffled)
/// topped up with replacement draws until `batch` indices are returned.
pub fn minibatch<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<usize> {
    if n == 0 || batch == 0 {
        return Vec::new();
    }
    if batch <= n {
        return index::sample(rng, n, batch).into_vec();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.extend((n..batch).map(|_| rng.random_range(0..n)));
    idx
}

pub fn label_entropy(hist: &[usize]) -> f64 {
    let total: usize = hist.iter().sum();
    if total == 0 {
        return 0.0;
    }
    hist.iter()
        .filter(|&&h| h > 0)
        .map(|&h| {
            let p = h as f64 / total as f64;
            -p * p.ln()
        })
        .sum()
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientLabelStats {
    pub client: usize,
    pub size: usize,
    pub histogram: Vec<usize>,
    pub entropy: f64,
}

/// Per-client label histograms and imbalance metrics.
///
/// Ratio and entropy statistics are taken over the non-empty shards.
#[derive(Debug, Clone, Serialize)]
pub struct PartitionSummary {
    pub num_clients: usize,
    pub num_classes: usize,
    pub empty_clients: usize,
    pub max_min_shard_ratio: Option<f64>,
    pub mean_entropy: f64,
    pub median_entropy: f64,
    pub clients: Vec<ClientLabelStats>,
}

pub fn summarize_partition(shards: &[Dataset]) -> PartitionSummary {
    let clients: Vec<ClientLabelStats> = shards
        .iter()
        .enumerate()
        .map(|(client, s)| {
            let histogram = s.label_histogram();
            ClientLabelStats {
                client,
                size: s.len(),
                entropy: label_entropy(&histogram),
                histogram,
            }
        })
        .collect();
    let nonempty: Vec<&ClientLabelStats> = clients.iter().filter(|c| c.size > 0).collect();
    let max = nonempty.iter().map(|c| c.size).max();
    let min = nonempty.iter().map(|c| c.size).min();
    let mut ent: Vec<f64> = nonempty.iter().map(|c| c.entropy).collect();
    ent.sort_by(f64::total_cmp);
    PartitionSummary {
        num_clients: shards.len(),
        num_classes: shards.first().map_or(0, |s| s.num_classes()),
        empty_clients: clients.len() - nonempty.len(),
        max_min_shard_ratio: max.zip(min).map(|(a, b)| a as f64 / b as f64),
        mean_entropy: if ent.is_empty() {
            0.0
        } else {
            ent.iter().sum::<f64>() / ent.len() as f64
        },
        median_entropy: median_sorted(&ent),
        clients,
    }
}

pub(crate) fn median_sorted(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n_classes: usize, spc: usize, seed: u64) -> Dataset {
        generate_synthetic_classification(n_classes, 4, spc, 3.0, seed).unwrap()
    }

    fn sorted_rows(d: &Dataset) -> Vec<(Vec<u64>, usize)> {
        let mut v: Vec<_> = (0..d.len())
            .map(|i| {
                (
                    d.row(i).iter().map(|x| x.to_bits()).collect(),
                    d.labels()[i],
                )
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn synthetic_size_and_determinism() {
        let a = blobs(5, 7, 11);
        assert_eq!(a.len(), 35);
        assert_eq!(a.label_histogram(), vec![7; 5]);
        assert_eq!(a, blobs(5, 7, 11));
        assert_ne!(a, blobs(5, 7, 12));
    }

    #[test]
    fn synthetic_rejects_bad_sizes() {
        assert!(generate_synthetic_classification(1, 4, 5, 1.0, 0).is_err());
        assert!(generate_synthetic_classification(3, 1, 5, 1.0, 0).is_err());
        assert!(generate_synthetic_classification(3, 2, 0, 1.0, 0).is_err());
        assert!(generate_synthetic_classification(3, 2, 5, 0.0, 0).is_err());
    }

    #[test]
    fn class_means_lie_on_sphere() {
        let g = BlobGenerator::new(4, 3, 2.5, 1).unwrap();
        for m in g.means() {
            let r = m.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((r - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn single_client_gets_everything() {
        let d = blobs(3, 10, 0);
        let shards = partition_dirichlet(
            &d,
            &PartitionSpec {
                num_clients: 1,
                alpha: 0.3,
                seed: 4,
            },
        )
        .unwrap();
        assert_eq!(shards.len(), 1);
        assert_eq!(sorted_rows(&shards[0]), sorted_rows(&d));
    }

    #[test]
    fn huge_alpha_is_near_uniform() {
        let d = blobs(5, 400, 2);
        let shards = partition_dirichlet(
            &d,
            &PartitionSpec {
                num_clients: 4,
                alpha: 1e6,
                seed: 9,
            },
        )
        .unwrap();
        for s in &shards {
            for (c, &h) in s.label_histogram().iter().enumerate() {
                let share = h as f64 / 400.0;
                assert!((share - 0.25).abs() <= 0.025, "class {c} share {share}");
            }
        }
    }

    #[test]
    fn tiny_alpha_concentrates_labels() {
        let d = blobs(10, 100, 3);
        let shards = partition_dirichlet(
            &d,
            &PartitionSpec {
                num_clients: 100,
                alpha: 0.01,
                seed: 5,
            },
        )
        .unwrap();
        let mut top2: Vec<f64> = shards
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                let mut h = s.label_histogram();
                h.sort_unstable_by(|a, b| b.cmp(a));
                (h[0] + h[1]) as f64 / s.len() as f64
            })
            .collect();
        top2.sort_by(f64::total_cmp);
        assert!(median_sorted(&top2) >= 0.8);
    }

    #[test]
    fn grouped_partition_respects_label_blocks() {
        let d = blobs(10, 50, 1);
        let shards = partition_dirichlet_grouped(
            &d,
            &PartitionSpec {
                num_clients: 20,
                alpha: 0.5,
                seed: 2,
            },
            2,
        )
        .unwrap();
        for (k, s) in shards.iter().enumerate() {
            let allowed = if k < 10 { 0..5 } else { 5..10 };
            assert!(s.labels().iter().all(|y| allowed.contains(y)), "client {k}");
        }
        let total: usize = shards.iter().map(Dataset::len).sum();
        assert_eq!(total, d.len());
        assert!(partition_dirichlet_grouped(
            &d,
            &PartitionSpec {
                num_clients: 2,
                alpha: 1.0,
                seed: 0
            },
            3
        )
        .is_err());
    }

    #[test]
    fn split_examples() {
        assert_eq!(
            split_sizes(100, 40, Leftover::FoldIntoTest),
            SplitSizes {
                train: 40,
                val: 10,
                test: 50
            }
        );
        assert_eq!(
            split_sizes(100, 10, Leftover::FoldIntoTest),
            SplitSizes {
                train: 10,
                val: 10,
                test: 80
            }
        );
        assert_eq!(
            split_sizes(100, 10, Leftover::Discard),
            SplitSizes {
                train: 10,
                val: 10,
                test: 50
            }
        );
        let d = blobs(2, 1, 0);
        assert_eq!(d.len(), 2);
        let b = split_train_val_test(&d, 40, Leftover::FoldIntoTest, 3);
        assert!(!b.active);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let d = blobs(4, 25, 8);
        let b = split_train_val_test(&d, 30, Leftover::FoldIntoTest, 1);
        assert!(b.active);
        assert_eq!((b.train.len(), b.val.len(), b.test.len()), (30, 10, 60));
        let mut joined = b.train.clone();
        joined.inputs.extend_from_slice(b.val.inputs());
        joined.labels.extend_from_slice(b.val.labels());
        joined.inputs.extend_from_slice(b.test.inputs());
        joined.labels.extend_from_slice(b.test.labels());
        assert_eq!(sorted_rows(&joined), sorted_rows(&d));
    }

    #[test]
    fn shares_sum_to_one_over_active() {
        let d = blobs(10, 30, 4);
        let shards = partition_dirichlet(
            &d,
            &PartitionSpec {
                num_clients: 30,
                alpha: 0.1,
                seed: 6,
            },
        )
        .unwrap();
        let bundles = split_clients(&shards, Leftover::FoldIntoTest, 6);
        assert!(bundles.iter().any(|b| !b.active));
        let sum: f64 = bundles.iter().filter(|b| b.active).map(|b| b.p_k).sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        assert!(bundles.iter().filter(|b| !b.active).all(|b| b.p_k == 0.0));
        assert!(bundles
            .iter()
            .filter(|b| b.active)
            .all(|b| b.p_k > 0.0 && b.p_k <= 1.0));
    }

    #[test]
    fn public_pool_examples() {
        let src = blobs(10, 1000, 1);
        let pool = draw_public_pool(&src, 2000, 3).unwrap();
        assert_eq!(pool.len(), 2000);
        assert_eq!(pool, draw_public_pool(&src, 2000, 3).unwrap());
        assert!(draw_public_pool(&src, 10_001, 3).is_err());

        let small = blobs(2, 5, 1);
        let all = draw_public_pool(&small, 10, 9).unwrap();
        let mut a: Vec<Vec<u64>> = all
            .inputs()
            .chunks(4)
            .map(|r| r.iter().map(|x| x.to_bits()).collect())
            .collect();
        let mut b: Vec<Vec<u64>> = small
            .inputs()
            .chunks(4)
            .map(|r| r.iter().map(|x| x.to_bits()).collect())
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    #[test]
    fn minibatch_shapes() {
        let mut rng = seeded(1);
        let mut full = minibatch(10, 10, &mut rng);
        full.sort_unstable();
        assert_eq!(full, (0..10).collect::<Vec<_>>());
        let one = minibatch(10, 1, &mut rng);
        assert_eq!(one.len(), 1);
        assert!(one[0] < 10);
        let big = minibatch(3, 7, &mut rng);
        assert_eq!(big.len(), 7);
        let mut head = big[..3].to_vec();
        head.sort_unstable();
        assert_eq!(head, vec![0, 1, 2]);
    }

    #[test]
    fn minibatch_inclusion_frequency() {
        // Each index is included with probability batch/n; 3-sigma band over 10^4 draws.
        let (n, batch, draws) = (20usize, 5usize, 10_000usize);
        let mut rng = seeded(77);
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            for i in minibatch(n, batch, &mut rng) {
                counts[i] += 1;
            }
        }
        let p = batch as f64 / n as f64;
        let mean = draws as f64 * p;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - mean).abs() <= 3.0 * sd,
                "count {c} vs {mean}±{sd}"
            );
        }
    }

    #[test]
    fn entropy_and_summary() {
        assert_eq!(label_entropy(&[0, 0]), 0.0);
        assert!((label_entropy(&[5, 5]) - 2f64.ln()).abs() < 1e-15);
        let d = blobs(10, 200, 5);
        let shards = partition_dirichlet(
            &d,
            &PartitionSpec {
                num_clients: 5,
                alpha: 1e6,
                seed: 1,
            },
        )
        .unwrap();
        let s = summarize_partition(&shards);
        assert_eq!(s.clients.len(), 5);
        assert!((s.mean_entropy - 10f64.ln()).abs() / 10f64.ln() < 0.05);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["clients"].as_array().unwrap().len(), 5);
    }

    #[test]
    fn csv_roundtrip() {
        let d = blobs(3, 4, 2);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,f2,f3,label\n"));
        assert_eq!(Dataset::read_csv(&buf[..], 3).unwrap(), d);
    }

    proptest::proptest! {
        #[test]
        fn partition_conserves_samples(k in 1usize..12, alpha in 0.01f64..10.0, seed in 0u64..1000) {
            let d = blobs(4, 15, seed);
            let shards = partition_dirichlet(&d, &PartitionSpec { num_clients: k, alpha, seed }).unwrap();
            proptest::prop_assert_eq!(shards.len(), k);
            let mut all = Dataset::empty(d.dim(), d.num_classes());
            for s in &shards {
                all.inputs.extend_from_slice(s.inputs());
                all.labels.extend_from_slice(s.labels());
            }
            proptest::prop_assert_eq!(sorted_rows(&all), sorted_rows(&d));
        }
    }
}
