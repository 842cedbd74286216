//! LightGCN propagation with BPR and SGL-style contrastive objectives.

mod adjacency;
mod loss;
mod optim;
mod train;

use std::sync::Arc;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::data::BipartiteGraph;
use crate::embio::{EmbeddingMatrix, EmbioError, KeySpace};
use crate::init::InitializedTables;
use crate::par;

pub use adjacency::NormAdjacency;
pub use loss::{bpr_loss, objective, ssl_loss, Gradients, SslViews, Triple};
pub use optim::{Adam, AdamConfig, AdamMoments};
pub use train::{sample_triples, train_epoch, EpochStats, TrainOptions};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid loss config: {0}")]
    Config(String),
    #[error("non-finite gradient in {table} table at row {row}, col {col}")]
    NonFiniteGradient {
        table: &'static str,
        row: usize,
        col: usize,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Embio(#[from] EmbioError),
}

/// Loss weights and SGL augmentation settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub l2_weight: f64,
    pub ssl_weight: f64,
    pub ssl_temperature: f64,
    pub edge_dropout: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            l2_weight: 1e-4,
            ssl_weight: 0.1,
            ssl_temperature: 0.2,
            edge_dropout: 0.1,
        }
    }
}

impl LossConfig {
    /// Plain LightGCN: BPR plus L2, no contrastive term.
    pub fn bpr_only() -> Self {
        Self {
            ssl_weight: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.l2_weight.is_nan() || self.l2_weight < 0.0 {
            return bad(format!("l2_weight must be >= 0, got {}", self.l2_weight));
        }
        if self.ssl_weight.is_nan() || self.ssl_weight < 0.0 {
            return bad(format!("ssl_weight must be >= 0, got {}", self.ssl_weight));
        }
        if self.ssl_temperature.is_nan() || self.ssl_temperature <= 0.0 {
            return bad(format!("ssl_temperature must be > 0, got {}", self.ssl_temperature));
        }
        if !(0.0..1.0).contains(&self.edge_dropout) {
            return bad(format!("edge_dropout must lie in [0, 1), got {}", self.edge_dropout));
        }
        Ok(())
    }
}

/// Trainable layer-0 tables plus the train-graph adjacency they propagate over.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub user_table: Array2<f64>,
    pub item_table: Array2<f64>,
    pub layers: usize,
    adjacency: Arc<NormAdjacency>,
}

impl ModelState {
    pub fn new(
        user_table: Array2<f64>,
        item_table: Array2<f64>,
        layers: usize,
        adjacency: Arc<NormAdjacency>,
    ) -> Result<Self, ModelError> {
        if user_table.nrows() != adjacency.n_users() || item_table.nrows() != adjacency.n_items() {
            return Err(ModelError::Shape(format!(
                "tables are {}x_ / {}x_, graph has {} users / {} items",
                user_table.nrows(),
                item_table.nrows(),
                adjacency.n_users(),
                adjacency.n_items()
            )));
        }
        if user_table.ncols() != item_table.ncols() {
            return Err(ModelError::Shape(format!(
                "user width {} != item width {}",
                user_table.ncols(),
                item_table.ncols()
            )));
        }
        Ok(Self {
            user_table: user_table.as_standard_layout().into_owned(),
            item_table: item_table.as_standard_layout().into_owned(),
            layers,
            adjacency,
        })
    }

    pub fn from_tables(tables: &InitializedTables, graph: &BipartiteGraph, layers: usize) -> Result<Self, ModelError> {
        Self::from_matrices(&tables.user_table, &tables.item_table, graph, layers)
    }

    pub fn from_matrices(
        users: &EmbeddingMatrix,
        items: &EmbeddingMatrix,
        graph: &BipartiteGraph,
        layers: usize,
    ) -> Result<Self, ModelError> {
        Self::new(
            to_array(users),
            to_array(items),
            layers,
            Arc::new(NormAdjacency::from_graph(graph)),
        )
    }

    pub fn adjacency(&self) -> &NormAdjacency {
        &self.adjacency
    }

    pub fn n_users(&self) -> usize {
        self.user_table.nrows()
    }

    pub fn n_items(&self) -> usize {
        self.item_table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.item_table.ncols()
    }

    /// Embedding-table parameter count, `(M + I) * K`.
    pub fn parameter_count(&self) -> usize {
        (self.n_users() + self.n_items()) * self.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.user_table
            .iter()
            .chain(self.item_table.iter())
            .all(|v| v.is_finite())
    }

    pub fn user_matrix(&self) -> Result<EmbeddingMatrix, ModelError> {
        from_array(&self.user_table, KeySpace::User)
    }

    pub fn item_matrix(&self) -> Result<EmbeddingMatrix, ModelError> {
        from_array(&self.item_table, KeySpace::Item)
    }
}

fn to_array(m: &EmbeddingMatrix) -> Array2<f64> {
    Array2::from_shape_vec((m.rows(), m.cols()), m.to_f64()).expect("rows * cols values")
}

fn from_array(a: &Array2<f64>, key_space: KeySpace) -> Result<EmbeddingMatrix, ModelError> {
    let data: Vec<f64> = a.iter().copied().collect();
    Ok(EmbeddingMatrix::from_f64(a.nrows(), a.ncols(), &data, key_space)?)
}

/// Final (layer-averaged) user and item representations.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    pub users: Array2<f64>,
    pub items: Array2<f64>,
}

impl Propagated {
    /// Inner-product scores of `user` against every item.
    pub fn score(&self, user: usize) -> Vec<f64> {
        score(self.users.row(user), &self.items)
    }
}

/// Mean over layers `0..=L` of the symmetric-normalized propagation.
pub fn propagate(state: &ModelState) -> Propagated {
    let (users, items) = state
        .adjacency
        .propagate(&state.user_table, &state.item_table, state.layers);
    Propagated { users, items }
}

/// `dot(user, items[i])` for every item row.
pub fn score(user: ArrayView1<'_, f64>, items: &Array2<f64>) -> Vec<f64> {
    let user = user.to_vec();
    let k = items.ncols();
    let flat = items.as_slice().expect("standard layout");
    par::map_range(items.nrows(), |i| {
        flat[i * k..(i + 1) * k].iter().zip(&user).map(|(a, b)| a * b).sum()
    })
}
