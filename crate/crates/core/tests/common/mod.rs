//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use cfseed::data::{self, Edge, InteractionDataset, Manifest, Split};
use cfseed::experiments::synthetic::{SyntheticConfig, SyntheticWorld};
use cfseed::EmbeddingMatrix;
use ndarray::Array2;
use rand::Rng;

/// Repeatedly drops every edge touching a user or item of degree `< k`
/// until nothing changes. Returns surviving `(user id, item id)` pairs.
pub fn brute_k_core(ds: &InteractionDataset, k: usize) -> BTreeSet<(String, String)> {
    let mut edges: Vec<(String, String)> = ds
        .interactions()
        .iter()
        .map(|e| (ds.user_ids()[e.user].clone(), ds.item_ids()[e.item].clone()))
        .collect();
    loop {
        let mut du: HashMap<&str, usize> = HashMap::new();
        let mut di: HashMap<&str, usize> = HashMap::new();
        for (u, i) in &edges {
            *du.entry(u).or_default() += 1;
            *di.entry(i).or_default() += 1;
        }
        let kept: Vec<(String, String)> = edges
            .iter()
            .filter(|(u, i)| du[u.as_str()] >= k && di[i.as_str()] >= k)
            .cloned()
            .collect();
        if kept.len() == edges.len() {
            return kept.into_iter().collect();
        }
        edges = kept;
    }
}

pub fn id_pairs(ds: &InteractionDataset) -> BTreeSet<(String, String)> {
    ds.interactions()
        .iter()
        .map(|e| (ds.user_ids()[e.user].clone(), ds.item_ids()[e.item].clone()))
        .collect()
}

/// Mean over layers `0..=L` of `A^l E` with the full `(M+I) x (M+I)`
/// normalized adjacency built densely.
pub fn dense_propagate(
    n_users: usize,
    n_items: usize,
    edges: &[(usize, usize)],
    users: &Array2<f64>,
    items: &Array2<f64>,
    layers: usize,
) -> (Array2<f64>, Array2<f64>) {
    let n = n_users + n_items;
    let k = users.ncols();
    let mut du = vec![0.0f64; n_users];
    let mut di = vec![0.0f64; n_items];
    for &(u, i) in edges {
        du[u] += 1.0;
        di[i] += 1.0;
    }
    let mut a = Array2::<f64>::zeros((n, n));
    for &(u, i) in edges {
        let w = 1.0 / (du[u] * di[i]).sqrt();
        a[[u, n_users + i]] = w;
        a[[n_users + i, u]] = w;
    }
    let mut e = Array2::<f64>::zeros((n, k));
    for r in 0..n_users {
        e.row_mut(r).assign(&users.row(r));
    }
    for r in 0..n_items {
        e.row_mut(n_users + r).assign(&items.row(r));
    }
    let mut sum = e.clone();
    let mut cur = e;
    for _ in 0..layers {
        cur = a.dot(&cur);
        sum += &cur;
    }
    sum /= (layers + 1) as f64;
    let u = sum.slice(ndarray::s![..n_users, ..]).to_owned();
    let i = sum.slice(ndarray::s![n_users.., ..]).to_owned();
    (u, i)
}

/// Reference evaluator: sorts every unmasked item by `(score desc, index asc)`
/// and reports the 1-based position of the held-out item, per user with one.
pub fn brute_ranks(scores: &Array2<f64>, split: &Split, include_validation_mask: bool) -> Vec<(usize, usize, usize)> {
    let mut masked: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); split.n_users];
    for e in &split.train {
        masked[e.user].insert(e.item);
    }
    if include_validation_mask {
        for e in &split.validation {
            masked[e.user].insert(e.item);
        }
    }
    let mut out = Vec::new();
    let mut tests: Vec<&Edge> = split.test.iter().collect();
    tests.sort_by_key(|e| e.user);
    for t in tests {
        let mut order: Vec<usize> = (0..split.n_items)
            .filter(|i| *i == t.item || !masked[t.user].contains(i))
            .collect();
        order.sort_by(|&a, &b| {
            scores[[t.user, b]]
                .partial_cmp(&scores[[t.user, a]])
                .unwrap()
                .then(a.cmp(&b))
        });
        let rank = order.iter().position(|&i| i == t.item).unwrap() + 1;
        out.push((t.user, t.item, rank));
    }
    out
}

pub fn brute_metrics(ranks: &[(usize, usize, usize)], k: usize) -> (f64, f64) {
    let n = ranks.len() as f64;
    let recall = ranks.iter().filter(|r| r.2 <= k).count() as f64 / n;
    let ndcg = ranks
        .iter()
        .map(|r| if r.2 <= k { 1.0 / ((r.2 + 1) as f64).log2() } else { 0.0 })
        .sum::<f64>()
        / n;
    (recall, ndcg)
}

/// Population variance per column, two-pass in f64.
pub fn brute_variances(m: &EmbeddingMatrix) -> Vec<f64> {
    (0..m.cols())
        .map(|c| {
            let col: Vec<f64> = (0..m.rows()).map(|r| m.get(r, c) as f64).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / col.len() as f64
        })
        .collect()
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> EmbeddingMatrix {
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-3.0f32..3.0)).collect();
    EmbeddingMatrix::new(rows, cols, data, cfseed::KeySpace::Item).unwrap()
}

/// Random dataset where every user has at least `min_len` interactions with
/// distinct items and distinct timestamps drawn from a small range.
pub fn random_dataset<R: Rng>(
    rng: &mut R,
    n_users: usize,
    n_items: usize,
    min_len: usize,
    max_len: usize,
) -> InteractionDataset {
    let mut records = Vec::new();
    for u in 0..n_users {
        let len = rng.random_range(min_len..=max_len).min(n_items);
        let items = rand::seq::index::sample(rng, n_items, len);
        for i in items {
            records.push((format!("u{u}"), format!("i{i}"), rng.random_range(0..20i64)));
        }
    }
    InteractionDataset::from_records(records)
}

/// `sqrt(sum (a - n)^2) / max(sqrt(sum a^2) + sqrt(sum n^2), 1e-12)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / (norm(analytic) + norm(numeric)).max(1e-12)
}

/// Synthetic clustered world, 5-core filtered and split, with item embeddings
/// aligned to the filtered item index.
pub struct Desk {
    pub manifest: Manifest,
    pub llm: EmbeddingMatrix,
}

pub fn desk(seed: u64) -> Desk {
    desk_with(SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
}

pub fn desk_with(cfg: SyntheticConfig) -> Desk {
    let world = SyntheticWorld::generate(&cfg);
    let core = data::k_core_filter(&world.dataset, 5).unwrap();
    let split = data::leave_one_out_split(&core).unwrap();
    let manifest = Manifest::new(&core, split);
    let llm = world.embeddings_for(&manifest.item_ids);
    Desk { manifest, llm }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
