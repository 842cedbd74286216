//! Clustered synthetic interactions with matching "language-model" item
//! embeddings, for desk-scale experiments without real data.
//!
//! Items fall into latent clusters. Each user prefers one primary and one
//! secondary cluster and draws most interactions from them, with a mild
//! popularity skew inside a cluster. An item's embedding is its cluster
//! centre (non-zero on a random subset of dimensions) plus item noise on
//! every dimension, so cluster-bearing dimensions have the larger variance.

use std::collections::{HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::InteractionDataset;
use crate::embio::{index_checksum, EmbeddingMatrix, KeySpace};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    /// Width of the generated item embeddings.
    pub embedding_dim: usize,
    /// Dimensions carrying cluster signal.
    pub signal_dims: usize,
    /// Standard deviation of per-item noise on every dimension.
    pub item_noise: f64,
    pub min_history: usize,
    pub max_history: usize,
    pub primary_share: f64,
    pub secondary_share: f64,
    /// Exponent of the within-cluster popularity weights `1 / (r + 1)^s`.
    pub popularity_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 1200,
            n_items: 1000,
            n_clusters: 10,
            embedding_dim: 256,
            signal_dims: 64,
            item_noise: 0.35,
            min_history: 5,
            max_history: 15,
            primary_share: 0.7,
            secondary_share: 0.2,
            popularity_skew: 0.6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub dataset: InteractionDataset,
    /// Cluster of each item id.
    pub cluster_of: HashMap<String, usize>,
    vectors: HashMap<String, Vec<f32>>,
    embedding_dim: usize,
}

impl SyntheticWorld {
    pub fn generate(cfg: &SyntheticConfig) -> Self {
        assert!(cfg.n_clusters > 0 && cfg.n_items >= cfg.n_clusters);
        assert!(cfg.signal_dims <= cfg.embedding_dim);
        assert!(cfg.min_history >= 1 && cfg.min_history <= cfg.max_history);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");

        let signal: Vec<usize> = index::sample(&mut rng, cfg.embedding_dim, cfg.signal_dims).into_vec();
        let centres: Vec<Vec<f64>> = (0..cfg.n_clusters)
            .map(|_| {
                let mut c = vec![0.0; cfg.embedding_dim];
                for &d in &signal {
                    c[d] = unit.sample(&mut rng);
                }
                c
            })
            .collect();

        let item_name = |i: usize| format!("item{i:05}");
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); cfg.n_clusters];
        let mut cluster_of = HashMap::new();
        let mut vectors = HashMap::new();
        for i in 0..cfg.n_items {
            let c = i % cfg.n_clusters;
            members[c].push(i);
            let v: Vec<f32> = centres[c]
                .iter()
                .map(|&x| (x + cfg.item_noise * unit.sample(&mut rng)) as f32)
                .collect();
            cluster_of.insert(item_name(i), c);
            vectors.insert(item_name(i), v);
        }
        let popularity: Vec<WeightedIndex<f64>> = members
            .iter()
            .map(|m| {
                let w: Vec<f64> = (0..m.len())
                    .map(|r| 1.0 / ((r + 1) as f64).powf(cfg.popularity_skew))
                    .collect();
                WeightedIndex::new(w).expect("positive weights")
            })
            .collect();

        let mut records = Vec::new();
        let mut clock = 0i64;
        for u in 0..cfg.n_users {
            let primary = rng.random_range(0..cfg.n_clusters);
            let secondary = (primary + rng.random_range(1..cfg.n_clusters.max(2))) % cfg.n_clusters;
            let len = rng.random_range(cfg.min_history..=cfg.max_history);
            let mut seen = HashSet::new();
            let mut attempts = 0;
            while seen.len() < len && attempts < 50 * len {
                attempts += 1;
                let roll: f64 = rng.random();
                let c = if roll < cfg.primary_share {
                    primary
                } else if roll < cfg.primary_share + cfg.secondary_share {
                    secondary
                } else {
                    rng.random_range(0..cfg.n_clusters)
                };
                let item = members[c][popularity[c].sample(&mut rng)];
                if seen.insert(item) {
                    clock += 1;
                    records.push((format!("user{u:05}"), item_name(item), clock));
                }
            }
        }
        Self {
            dataset: InteractionDataset::from_records(records),
            cluster_of,
            vectors,
            embedding_dim: cfg.embedding_dim,
        }
    }

    /// Item embedding matrix whose row `r` belongs to `item_ids[r]`, with the
    /// index checksum recorded.
    pub fn embeddings_for(&self, item_ids: &[String]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(item_ids.len() * self.embedding_dim);
        for id in item_ids {
            data.extend_from_slice(&self.vectors[id]);
        }
        EmbeddingMatrix::new(item_ids.len(), self.embedding_dim, data, KeySpace::Item)
            .expect("finite generated values")
            .with_index_checksum(index_checksum(item_ids))
    }
}
