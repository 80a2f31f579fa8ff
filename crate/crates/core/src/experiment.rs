//! Builds a client population (partitioned data, public pool, model specs and
//! initial parameters) from one master seed.

use serde::{Deserialize, Serialize};

use crate::data::{
    draw_public_pool, partition_dirichlet_grouped, split_clients, summarize_partition,
    BlobGenerator, Dataset, Leftover, PartitionSpec, PartitionSummary, PublicPool,
};
use crate::error::{Error, Result};
use crate::federation::ClientRecord;
use crate::models::ModelSpec;
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub dim: usize,
    /// Radius of the sphere the class means sit on.
    pub separation: f64,
    pub samples_per_class: usize,
    pub num_clients: usize,
    /// Dirichlet concentration.
    pub alpha: f64,
    /// Clients and labels are split into this many disjoint blocks.
    pub label_groups: usize,
    pub pool_size: usize,
    /// Translation of the public source relative to the client blobs.
    pub pool_offset: f64,
    pub pool_samples_per_class: usize,
    pub leftover: Leftover,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            dim: 20,
            separation: 4.0,
            samples_per_class: 200,
            num_clients: 20,
            alpha: 0.5,
            label_groups: 1,
            pool_size: 200,
            pool_offset: 0.5,
            pool_samples_per_class: 100,
            leftover: Leftover::FoldIntoTest,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelChoice {
    Softmax,
    Mlp {
        hidden: usize,
    },
    /// Clients in the lowest third of `p_k` get softmax regression, the middle
    /// third an MLP with `hidden_medium` units, the top third `hidden_large`.
    Tercile {
        hidden_medium: usize,
        hidden_large: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub choice: ModelChoice,
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            choice: ModelChoice::Softmax,
            init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Population {
    pub clients: Vec<ClientRecord>,
    pub pool: PublicPool,
    pub partition: PartitionSummary,
}

impl Population {
    pub fn active_count(&self) -> usize {
        self.clients.iter().filter(|c| c.is_active()).count()
    }
}

/// Specs by `p_k` rank: ranks below `n/3` get `small`, below `2n/3` `medium`,
/// the rest `large`. Ties in `p_k` keep client order. Inactive clients get `small`.
pub fn assign_specs_by_terciles(
    p_k: &[f64],
    active: &[bool],
    small: &ModelSpec,
    medium: &ModelSpec,
    large: &ModelSpec,
) -> Vec<ModelSpec> {
    let mut order: Vec<usize> = (0..p_k.len()).filter(|&i| active[i]).collect();
    order.sort_by(|&a, &b| p_k[a].total_cmp(&p_k[b]));
    let n = order.len();
    let mut specs = vec![*small; p_k.len()];
    for (rank, &i) in order.iter().enumerate() {
        specs[i] = if 3 * rank < n {
            *small
        } else if 3 * rank < 2 * n {
            *medium
        } else {
            *large
        };
    }
    specs
}

/// The class-blob generator and the per-client Dirichlet shards for `seed`.
pub fn partition_shards(data: &DataConfig, seed: u64) -> Result<(BlobGenerator, Vec<Dataset>)> {
    let generator = BlobGenerator::new(
        data.num_classes,
        data.dim,
        data.separation,
        derive_seed(seed, Stream::Data, 0, 0),
    )?;
    let pooled = generator.sample(
        data.samples_per_class,
        derive_seed(seed, Stream::Data, 1, 0),
    )?;
    let spec = PartitionSpec {
        num_clients: data.num_clients,
        alpha: data.alpha,
        seed,
    };
    let shards = partition_dirichlet_grouped(&pooled, &spec, data.label_groups)?;
    Ok((generator, shards))
}

pub fn build_population(data: &DataConfig, model: &ModelConfig, seed: u64) -> Result<Population> {
    let (generator, shards) = partition_shards(data, seed)?;
    let partition = summarize_partition(&shards);
    let bundles = split_clients(&shards, data.leftover, seed);

    let public_source = generator.shifted(data.pool_offset).sample(
        data.pool_samples_per_class,
        derive_seed(seed, Stream::Public, 0, 0),
    )?;
    if data.pool_size > public_source.len() {
        return Err(Error::config(format!(
            "pool_size {} exceeds the {} public samples generated",
            data.pool_size,
            public_source.len()
        )));
    }
    let pool = draw_public_pool(
        &public_source,
        data.pool_size,
        derive_seed(seed, Stream::Public, 1, 0),
    )?;

    let (d, n) = (data.dim, data.num_classes);
    let with_scale = |s: ModelSpec| s.with_init_scale(model.init_scale);
    let specs = match model.choice {
        ModelChoice::Softmax => vec![with_scale(ModelSpec::softmax(d, n)); bundles.len()],
        ModelChoice::Mlp { hidden } => {
            vec![with_scale(ModelSpec::mlp(d, hidden, n)); bundles.len()]
        }
        ModelChoice::Tercile {
            hidden_medium,
            hidden_large,
        } => {
            let p: Vec<f64> = bundles.iter().map(|b| b.p_k).collect();
            let act: Vec<bool> = bundles.iter().map(|b| b.active).collect();
            assign_specs_by_terciles(
                &p,
                &act,
                &with_scale(ModelSpec::softmax(d, n)),
                &with_scale(ModelSpec::mlp(d, hidden_medium, n)),
                &with_scale(ModelSpec::mlp(d, hidden_large, n)),
            )
        }
    };
    for s in &specs {
        s.validate()?;
    }
    let clients = bundles
        .into_iter()
        .zip(specs)
        .enumerate()
        .map(|(id, (bundle, spec))| ClientRecord::new(id, spec, bundle, seed))
        .collect();
    Ok(Population {
        clients,
        pool,
        partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Arch;

    #[test]
    fn population_is_reproducible() {
        let cfg = DataConfig {
            num_clients: 6,
            samples_per_class: 30,
            dim: 4,
            num_classes: 3,
            pool_size: 20,
            pool_samples_per_class: 10,
            ..Default::default()
        };
        let a = build_population(&cfg, &ModelConfig::default(), 5).unwrap();
        let b = build_population(&cfg, &ModelConfig::default(), 5).unwrap();
        assert_eq!(a.pool, b.pool);
        for (x, y) in a.clients.iter().zip(&b.clients) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.bundle.train, y.bundle.train);
        }
        let total: f64 = a
            .clients
            .iter()
            .filter(|c| c.is_active())
            .map(|c| c.p_k())
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn terciles_follow_dataset_size() {
        let p = [0.3, 0.05, 0.2, 0.1, 0.25, 0.1, 0.0];
        let act = [true, true, true, true, true, true, false];
        let small = ModelSpec::softmax(2, 2);
        let medium = ModelSpec::mlp(2, 3, 2);
        let large = ModelSpec::mlp(2, 8, 2);
        let s = assign_specs_by_terciles(&p, &act, &small, &medium, &large);
        // Ranks: 1 (0.05), 3 (0.1), 5 (0.1), 2 (0.2), 4 (0.25), 0 (0.3).
        assert_eq!(s[1], small);
        assert_eq!(s[3], small);
        assert_eq!(s[5], medium);
        assert_eq!(s[2], medium);
        assert_eq!(s[4], large);
        assert_eq!(s[0], large);
        assert_eq!(s[6], small);
    }

    #[test]
    fn tercile_choice_builds_mixed_architectures() {
        let cfg = DataConfig {
            num_clients: 9,
            samples_per_class: 40,
            dim: 3,
            num_classes: 3,
            alpha: 1.0,
            pool_size: 20,
            pool_samples_per_class: 10,
            ..Default::default()
        };
        let model = ModelConfig {
            choice: ModelChoice::Tercile {
                hidden_medium: 4,
                hidden_large: 8,
            },
            init_scale: 0.1,
        };
        let pop = build_population(&cfg, &model, 1).unwrap();
        let kinds: Vec<usize> = pop
            .clients
            .iter()
            .filter(|c| c.is_active())
            .map(|c| match c.spec.arch {
                Arch::SoftmaxLinear { .. } => 0,
                Arch::Mlp { hidden: 4, .. } => 1,
                _ => 2,
            })
            .collect();
        assert!(kinds.contains(&0) && kinds.contains(&1) && kinds.contains(&2));
    }

    #[test]
    fn oversized_pool_is_rejected() {
        let cfg = DataConfig {
            pool_size: 10_000,
            ..Default::default()
        };
        assert!(matches!(
            build_population(&cfg, &ModelConfig::default(), 0),
            Err(Error::Config(_))
        ));
    }
}
