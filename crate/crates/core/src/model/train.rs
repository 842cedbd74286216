use rand::seq::SliceRandom;
use rand::Rng;

use super::{objective, Adam, LossConfig, ModelError, ModelState, SslViews, Triple};
use crate::data::BipartiteGraph;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub loss: LossConfig,
    /// Compute losses but never update the tables.
    pub freeze: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            loss: LossConfig::default(),
            freeze: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub batches: usize,
}

/// One triple per train edge, in shuffled order. Negatives are uniform over
/// the items the user has no train edge with; users adjacent to every item
/// contribute nothing.
pub fn sample_triples<R: Rng>(graph: &BipartiteGraph, rng: &mut R) -> Vec<Triple> {
    let n_items = graph.n_items();
    let mut triples = Vec::with_capacity(graph.n_edges());
    for (user, pos) in graph.edges() {
        if graph.user_degree(user) >= n_items {
            continue;
        }
        let neg = loop {
            let candidate = rng.random_range(0..n_items);
            if !graph.contains(user, candidate) {
                break candidate;
            }
        };
        triples.push(Triple { user, pos, neg });
    }
    triples.shuffle(rng);
    triples
}

/// Runs one pass over freshly sampled triples. SGL views are redrawn once per
/// epoch when the contrastive term is active.
pub fn train_epoch<R: Rng>(
    state: &mut ModelState,
    adam: &mut Adam,
    graph: &BipartiteGraph,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<EpochStats, ModelError> {
    opts.loss.validate()?;
    let batch_size = opts.batch_size.max(1);
    let triples = sample_triples(graph, rng);
    let views = (opts.loss.ssl_weight > 0.0).then(|| SslViews::sample(graph, opts.loss.edge_dropout, rng));
    let mut total = 0.0;
    let mut batches = 0;
    for batch in triples.chunks(batch_size) {
        let (loss, grads) = objective(state, batch, views.as_ref(), &opts.loss)?;
        if !opts.freeze {
            adam.step(state, &grads)?;
        }
        total += loss;
        batches += 1;
    }
    Ok(EpochStats {
        mean_loss: if batches > 0 { total / batches as f64 } else { 0.0 },
        batches,
    })
}
