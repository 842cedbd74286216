//! Embedding-table initialization from a precomputed item embedding matrix.
//!
//! An item matrix of width `N` is reduced to `K` columns by one of the
//! selection strategies, then user rows are pooled from each user's train
//! neighbours.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::BipartiteGraph;
use crate::embio::{EmbeddingMatrix, EmbioError, KeySpace};
use crate::par;

/// Standard deviation of the random baseline tables.
pub const BASELINE_STD: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum InitError {
    #[error("cannot select {k} of {n} dimensions")]
    Dimension { k: usize, n: usize },
    #[error("variance needs at least 2 rows, matrix has {0}")]
    Statistics(usize),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("user {0} has no train neighbours to aggregate")]
    ZeroDegreeUser(usize),
    #[error("strategy `{0}` needs an item embedding matrix")]
    MissingEmbeddings(Strategy),
    #[error(transparent)]
    Embio(#[from] EmbioError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rand,
    Uni,
    Var,
    Full,
    Baseline,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rand => "rand",
            Strategy::Uni => "uni",
            Strategy::Var => "var",
            Strategy::Full => "full",
            Strategy::Baseline => "baseline",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rand" => Ok(Strategy::Rand),
            "uni" => Ok(Strategy::Uni),
            "var" => Ok(Strategy::Var),
            "full" => Ok(Strategy::Full),
            "baseline" => Ok(Strategy::Baseline),
            _ => Err(format!("unknown strategy {s:?} (rand, uni, var, full, baseline)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
    Prop,
}

impl FromStr for Pooling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "max" => Ok(Pooling::Max),
            "prop" => Ok(Pooling::Prop),
            _ => Err(format!("unknown pooling {s:?} (mean, max, prop)")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rescale {
    #[default]
    None,
    Zscore,
}

/// `K` distinct column indices out of a source width `N`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
    source_dim: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, source_dim: usize) -> Result<Self, InitError> {
        let k = indices.len();
        if k == 0 || k > source_dim {
            return Err(InitError::Dimension { k, n: source_dim });
        }
        let mut seen = vec![false; source_dim];
        for &i in &indices {
            if i >= source_dim || std::mem::replace(&mut seen[i], true) {
                return Err(InitError::Mismatch(format!(
                    "index {i} repeated or outside 0..{source_dim}"
                )));
            }
        }
        Ok(Self { indices, source_dim })
    }

    pub fn identity(n: usize) -> Result<Self, InitError> {
        Self::new((0..n).collect(), n)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.indices.len()
    }
}

fn check_dims(n: usize, k: usize) -> Result<(), InitError> {
    if k == 0 || k > n {
        Err(InitError::Dimension { k, n })
    } else {
        Ok(())
    }
}

/// Evenly spaced indices `j * floor(N / K)` for `j` in `0..K`.
pub fn select_uniform(n: usize, k: usize) -> Result<IndexSet, InitError> {
    check_dims(n, k)?;
    let stride = n / k;
    IndexSet::new((0..k).map(|j| j * stride).collect(), n)
}

/// `K` indices drawn uniformly without replacement, returned ascending.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<IndexSet, InitError> {
    check_dims(n, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = index::sample(&mut rng, n, k).into_vec();
    indices.sort_unstable();
    IndexSet::new(indices, n)
}

/// Population variance of each column, accumulated in `f64`.
pub fn column_variances(m: &EmbeddingMatrix) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|x| *x /= rows as f64);
    let mut var = vec![0.0f64; cols];
    for r in 0..rows {
        for ((acc, &v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            let d = v as f64 - mu;
            *acc += d * d;
        }
    }
    var.iter_mut().for_each(|x| *x /= rows as f64);
    var
}

/// The `K` highest-variance columns, in descending variance order; equal
/// variances go to the lower index first.
pub fn select_variance(m: &EmbeddingMatrix, k: usize) -> Result<IndexSet, InitError> {
    if m.rows() < 2 {
        return Err(InitError::Statistics(m.rows()));
    }
    check_dims(m.cols(), k)?;
    let var = column_variances(m);
    let mut order: Vec<usize> = (0..m.cols()).collect();
    order.sort_by(|&a, &b| var[b].total_cmp(&var[a]).then(a.cmp(&b)));
    order.truncate(k);
    IndexSet::new(order, m.cols())
}

/// Copies the selected columns, in `idx` order, into a new `rows x K` matrix.
/// With [`Rescale::Zscore`] each kept column is standardized afterwards; a
/// constant column becomes all zeros.
pub fn apply_selection(m: &EmbeddingMatrix, idx: &IndexSet, rescale: Rescale) -> Result<EmbeddingMatrix, InitError> {
    if idx.source_dim() != m.cols() {
        return Err(InitError::Mismatch(format!(
            "index set over {} dims, matrix has {} cols",
            idx.source_dim(),
            m.cols()
        )));
    }
    let k = idx.target_dim();
    let mut data = vec![0.0f32; m.rows() * k];
    par::for_each_row_mut(&mut data, k, |r, row| {
        let src = m.row(r);
        for (dst, &c) in row.iter_mut().zip(idx.indices()) {
            *dst = src[c];
        }
    });
    let mut out = EmbeddingMatrix::new(m.rows(), k, data, m.key_space())?;
    if rescale == Rescale::Zscore && m.rows() > 0 {
        out = zscore(&out)?;
    }
    Ok(out.with_index_checksum(m.index_checksum()))
}

fn zscore(m: &EmbeddingMatrix) -> Result<EmbeddingMatrix, InitError> {
    let (rows, cols) = (m.rows(), m.cols());
    let var = column_variances(m);
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        for (acc, &v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|x| *x /= rows as f64);
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 0.0 })
        .collect();
    let mut data = vec![0.0f32; rows * cols];
    par::for_each_row_mut(&mut data, cols, |r, row| {
        for (c, dst) in row.iter_mut().enumerate() {
            *dst = ((m.get(r, c) as f64 - mean[c]) * inv_std[c]) as f32;
        }
    });
    Ok(EmbeddingMatrix::new(rows, cols, data, m.key_space())?)
}

/// All `N` columns: the identity selection.
pub fn select_full(m: &EmbeddingMatrix, rescale: Rescale) -> Result<EmbeddingMatrix, InitError> {
    apply_selection(m, &IndexSet::identity(m.cols())?, rescale)
}

/// Pools each user's train-neighbour item rows into a user row.
///
/// - `Mean`: `sum_j v_j / |N_u|`
/// - `Max`: coordinate-wise maximum
/// - `Prop`: `sum_j v_j / sqrt(|N_u| * |N_j|)`
pub fn aggregate_users(
    item_table: &EmbeddingMatrix,
    graph: &BipartiteGraph,
    pooling: Pooling,
) -> Result<EmbeddingMatrix, InitError> {
    if item_table.rows() != graph.n_items() {
        return Err(InitError::Mismatch(format!(
            "item table has {} rows, graph has {} items",
            item_table.rows(),
            graph.n_items()
        )));
    }
    if let Some(u) = (0..graph.n_users()).find(|&u| graph.user_degree(u) == 0) {
        return Err(InitError::ZeroDegreeUser(u));
    }
    let k = item_table.cols();
    let mut data = vec![0.0f32; graph.n_users() * k];
    par::for_each_row_mut(&mut data, k, |u, row| {
        let neighbors = graph.user_neighbors(u);
        match pooling {
            Pooling::Mean => {
                let mut acc = vec![0.0f64; k];
                for &j in neighbors {
                    for (a, &v) in acc.iter_mut().zip(item_table.row(j)) {
                        *a += v as f64;
                    }
                }
                let n = neighbors.len() as f64;
                for (dst, a) in row.iter_mut().zip(&acc) {
                    *dst = (a / n) as f32;
                }
            }
            Pooling::Max => {
                row.copy_from_slice(item_table.row(neighbors[0]));
                for &j in &neighbors[1..] {
                    for (dst, &v) in row.iter_mut().zip(item_table.row(j)) {
                        *dst = dst.max(v);
                    }
                }
            }
            Pooling::Prop => {
                let du = neighbors.len() as f64;
                let mut acc = vec![0.0f64; k];
                for &j in neighbors {
                    let w = 1.0 / (du * graph.item_degree(j) as f64).sqrt();
                    for (a, &v) in acc.iter_mut().zip(item_table.row(j)) {
                        *a += w * v as f64;
                    }
                }
                for (dst, a) in row.iter_mut().zip(&acc) {
                    *dst = *a as f32;
                }
            }
        }
    });
    Ok(EmbeddingMatrix::new(graph.n_users(), k, data, KeySpace::User)?)
}

/// Item and user tables ready to seed a model.
#[derive(Clone, Debug, PartialEq)]
pub struct InitializedTables {
    pub item_table: EmbeddingMatrix,
    pub user_table: EmbeddingMatrix,
    pub strategy: Strategy,
    /// `None` for the random baseline, which does no pooling.
    pub pooling: Option<Pooling>,
    pub indices: Option<IndexSet>,
}

impl InitializedTables {
    pub fn dim(&self) -> usize {
        self.item_table.cols()
    }
}

/// Independent `N(0, 0.1^2)` entries for both tables. Items are drawn first.
pub fn init_baseline_random(
    n_users: usize,
    n_items: usize,
    k: usize,
    seed: u64,
) -> Result<InitializedTables, InitError> {
    if k == 0 {
        return Err(InitError::Dimension { k, n: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, BASELINE_STD).expect("valid std");
    let mut draw = |n: usize| -> Vec<f32> { (0..n).map(|_| normal.sample(&mut rng) as f32).collect() };
    let items = draw(n_items * k);
    let users = draw(n_users * k);
    Ok(InitializedTables {
        item_table: EmbeddingMatrix::new(n_items, k, items, KeySpace::Item)?,
        user_table: EmbeddingMatrix::new(n_users, k, users, KeySpace::User)?,
        strategy: Strategy::Baseline,
        pooling: None,
        indices: None,
    })
}

/// Options for [`initialize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitOptions {
    pub strategy: Strategy,
    pub dim: usize,
    pub pooling: Pooling,
    pub rescale: Rescale,
    pub seed: u64,
}

/// Builds both tables for `strategy`. `llm_items` must be aligned to the
/// graph's item index for every strategy except the baseline.
pub fn initialize(
    opts: &InitOptions,
    llm_items: Option<&EmbeddingMatrix>,
    graph: &BipartiteGraph,
) -> Result<InitializedTables, InitError> {
    if opts.strategy == Strategy::Baseline {
        return init_baseline_random(graph.n_users(), graph.n_items(), opts.dim, opts.seed);
    }
    let llm = llm_items.ok_or(InitError::MissingEmbeddings(opts.strategy))?;
    if llm.rows() != graph.n_items() {
        return Err(InitError::Mismatch(format!(
            "embedding matrix has {} rows, dataset has {} items",
            llm.rows(),
            graph.n_items()
        )));
    }
    let idx = match opts.strategy {
        Strategy::Uni => select_uniform(llm.cols(), opts.dim)?,
        Strategy::Rand => select_random(llm.cols(), opts.dim, opts.seed)?,
        Strategy::Var => select_variance(llm, opts.dim)?,
        Strategy::Full => IndexSet::identity(llm.cols())?,
        Strategy::Baseline => unreachable!(),
    };
    let item_table = apply_selection(llm, &idx, opts.rescale)?;
    let user_table = aggregate_users(&item_table, graph, opts.pooling)?;
    Ok(InitializedTables {
        item_table,
        user_table,
        strategy: opts.strategy,
        pooling: Some(opts.pooling),
        indices: Some(idx),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Edge;
    use rand::Rng;

    fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> EmbeddingMatrix {
        EmbeddingMatrix::new(rows, cols, data, KeySpace::Item).unwrap()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|k| rng.random_range(-1.0f32..1.0) * (1.0 + (k % cols) as f32 * 0.1))
            .collect();
        matrix(rows, cols, data)
    }

    #[test]
    fn uniform_formula() {
        assert_eq!(select_uniform(10, 3).unwrap().indices(), &[0, 3, 6]);
        assert_eq!(select_uniform(7, 7).unwrap().indices(), &[0, 1, 2, 3, 4, 5, 6]);
        let idx = select_uniform(768, 128).unwrap();
        assert_eq!(idx.indices().len(), 128);
        assert!(idx.indices().iter().enumerate().all(|(k, &i)| i == 6 * k));
        assert_eq!(*idx.indices().last().unwrap(), 762);
        assert!(matches!(select_uniform(3, 4), Err(InitError::Dimension { k: 4, n: 3 })));
        assert!(select_uniform(3, 0).is_err());
    }

    #[test]
    fn random_exhaustive_and_seeded() {
        assert_eq!(select_random(5, 5, 99).unwrap().indices(), &[0, 1, 2, 3, 4]);
        assert_eq!(select_random(100, 10, 42).unwrap(), select_random(100, 10, 42).unwrap());
        assert_ne!(select_random(100, 10, 42).unwrap(), select_random(100, 10, 43).unwrap());
        assert!(select_random(4, 5, 0).is_err());
    }

    #[test]
    fn variance_ties_go_low() {
        // Column variances 0.1, 5.0, 5.0, 0.2 (population, two rows).
        let half = |v: f32| v.sqrt();
        let m = matrix(
            2,
            4,
            vec![
                -half(0.1),
                -half(5.0),
                half(5.0),
                -half(0.2),
                half(0.1),
                half(5.0),
                -half(5.0),
                half(0.2),
            ],
        );
        assert_eq!(select_variance(&m, 2).unwrap().indices(), &[1, 2]);
    }

    #[test]
    fn variance_constant_matrix() {
        let m = matrix(3, 4, vec![2.0; 12]);
        assert_eq!(select_variance(&m, 1).unwrap().indices(), &[0]);
        let one_row = matrix(1, 4, vec![2.0; 4]);
        assert!(matches!(select_variance(&one_row, 1), Err(InitError::Statistics(1))));
    }

    #[test]
    fn variance_matches_full_sort() {
        let m = random_matrix(200, 32, 3);
        let idx = select_variance(&m, 8).unwrap();
        // Independent oracle: two-pass variance per column straight off the rows.
        let var: Vec<f64> = (0..32)
            .map(|c| {
                let col: Vec<f64> = (0..200).map(|r| m.get(r, c) as f64).collect();
                let mu = col.iter().sum::<f64>() / 200.0;
                col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 200.0
            })
            .collect();
        let mut sorted: Vec<usize> = (0..32).collect();
        sorted.sort_by(|&a, &b| var[b].partial_cmp(&var[a]).unwrap());
        assert_eq!(idx.indices(), &sorted[..8]);
        let min_sel = idx.indices().iter().map(|&i| var[i]).fold(f64::INFINITY, f64::min);
        let max_rest = (0..32)
            .filter(|i| !idx.indices().contains(i))
            .map(|i| var[i])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_sel >= max_rest);
    }

    #[test]
    fn selection_copies_columns() {
        let m = matrix(2, 4, vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        let idx = IndexSet::new(vec![0, 2], 4).unwrap();
        let out = apply_selection(&m, &idx, Rescale::None).unwrap();
        assert_eq!(out.data(), &[1., 3., 5., 7.]);
        let same = apply_selection(&m, &select_uniform(4, 4).unwrap(), Rescale::None).unwrap();
        assert_eq!(same, m);
        let wrong = IndexSet::new(vec![0, 2], 5).unwrap();
        assert!(matches!(
            apply_selection(&m, &wrong, Rescale::None),
            Err(InitError::Mismatch(_))
        ));
    }

    #[test]
    fn zscore_columns_are_standard() {
        let m = random_matrix(300, 16, 8);
        let out = apply_selection(&m, &select_uniform(16, 8).unwrap(), Rescale::Zscore).unwrap();
        for c in 0..8 {
            let col: Vec<f64> = (0..300).map(|r| out.get(r, c) as f64).collect();
            let mu = col.iter().sum::<f64>() / 300.0;
            let var = col.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 300.0;
            assert!(mu.abs() < 1e-5, "mean {mu}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn full_selection_is_identity() {
        let m = random_matrix(5, 6, 1);
        assert_eq!(select_full(&m, Rescale::None).unwrap(), m);
    }

    fn graph(n_users: usize, n_items: usize, edges: &[(usize, usize)]) -> BipartiteGraph {
        let edges: Vec<Edge> = edges.iter().map(|&(u, i)| Edge::new(u, i, 0)).collect();
        BipartiteGraph::from_edges(n_users, n_items, &edges)
    }

    #[test]
    fn mean_pooling_averages() {
        let items = matrix(3, 2, vec![0., 0., 1., 2., 3., 4.]);
        let g = graph(1, 3, &[(0, 1), (0, 2)]);
        let users = aggregate_users(&items, &g, Pooling::Mean).unwrap();
        assert_eq!(users.data(), &[2., 3.]);
        assert_eq!(users.key_space(), KeySpace::User);
        let users = aggregate_users(&items, &g, Pooling::Max).unwrap();
        assert_eq!(users.data(), &[3., 4.]);
    }

    #[test]
    fn single_neighbour_pooling() {
        let items = matrix(2, 2, vec![1., -2., 4., 8.]);
        // User 0 -> item 1 only; item 1 also has user 1, so degree 2.
        let g = graph(2, 2, &[(0, 1), (1, 0), (1, 1)]);
        for p in [Pooling::Mean, Pooling::Max] {
            assert_eq!(aggregate_users(&items, &g, p).unwrap().row(0), &[4., 8.]);
        }
        let prop = aggregate_users(&items, &g, Pooling::Prop).unwrap();
        let s = 1.0 / 2f64.sqrt();
        assert_eq!(prop.row(0), &[(4.0 * s) as f32, (8.0 * s) as f32]);
        let g1 = graph(1, 2, &[(0, 1)]);
        assert_eq!(aggregate_users(&items, &g1, Pooling::Prop).unwrap().row(0), &[4., 8.]);
    }

    #[test]
    fn zero_degree_user_is_an_error() {
        let items = matrix(2, 2, vec![1., 2., 3., 4.]);
        let g = graph(2, 2, &[(0, 1)]);
        assert!(matches!(
            aggregate_users(&items, &g, Pooling::Mean),
            Err(InitError::ZeroDegreeUser(1))
        ));
    }

    #[test]
    fn baseline_statistics() {
        let t = init_baseline_random(300, 500, 256, 4).unwrap();
        assert_eq!(t, init_baseline_random(300, 500, 256, 4).unwrap());
        let all: Vec<f64> = t.item_table.to_f64();
        let n = all.len() as f64;
        let mu = all.iter().sum::<f64>() / n;
        let sd = (all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mu.abs() < 0.01);
        assert!((sd - 0.1).abs() < 0.005, "std {sd}");
        assert_eq!(t.strategy, Strategy::Baseline);
        assert_eq!(t.user_table.rows(), 300);
    }

    #[test]
    fn initialize_requires_embeddings() {
        let g = graph(1, 2, &[(0, 0), (0, 1)]);
        let opts = InitOptions {
            strategy: Strategy::Var,
            dim: 2,
            pooling: Pooling::Mean,
            rescale: Rescale::None,
            seed: 0,
        };
        assert!(matches!(
            initialize(&opts, None, &g),
            Err(InitError::MissingEmbeddings(Strategy::Var))
        ));
        let llm = random_matrix(2, 5, 2);
        let t = initialize(&opts, Some(&llm), &g).unwrap();
        assert_eq!((t.item_table.cols(), t.user_table.cols()), (2, 2));
        let full = initialize(
            &InitOptions {
                strategy: Strategy::Full,
                ..opts
            },
            Some(&llm),
            &g,
        )
        .unwrap();
        assert_eq!(full.dim(), 5);
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in [
            Strategy::Rand,
            Strategy::Uni,
            Strategy::Var,
            Strategy::Full,
            Strategy::Baseline,
        ] {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert_eq!("prop".parse::<Pooling>().unwrap(), Pooling::Prop);
        assert!("pca".parse::<Strategy>().is_err());
    }
}
