//! Collaborative filtering with embedding tables seeded from precomputed
//! language-model item embeddings.
//!
//! The crate is organised as a pipeline:
//!
//! - [`data`]: interaction ingestion, k-core filtering, leave-one-out and
//!   cold-start splits, bipartite graph construction.
//! - [`embio`]: the `LMI1` binary format for embedding matrices.
//! - [`init`]: dimension selection (uniform, random, variance, full) and
//!   user-table aggregation over train neighbours.
//! - [`model`]: LightGCN propagation, BPR and InfoNCE objectives, Adam.
//! - [`eval`]: full-ranking Recall@K / NDCG@K.
//! - [`experiments`]: end-to-end runs, embedding-size sweeps and cold-start
//!   studies driven by a [`experiments::RunConfig`].
//!
//! Row-parallel kernels use rayon when the `parallel` feature (on by default)
//! is enabled and fall back to plain iterators otherwise. Both paths produce
//! bitwise-identical results.

pub mod data;
pub mod embio;
pub mod eval;
pub mod experiments;
pub mod init;
pub mod model;
pub mod par;

pub use data::{BipartiteGraph, Edge, InteractionDataset, Split};
pub use embio::{EmbeddingMatrix, KeySpace};
pub use eval::EvalReport;
pub use experiments::RunConfig;
pub use init::{IndexSet, InitializedTables, Pooling, Rescale, Strategy};
pub use model::{LossConfig, ModelState};

/// Top-level error for pipeline stages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Embio(#[from] embio::EmbioError),
    #[error(transparent)]
    Init(#[from] init::InitError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
