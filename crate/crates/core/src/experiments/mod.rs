//! End-to-end runs: main comparison, embedding-size sweep, cold-start study.

mod config;
pub mod synthetic;

use std::fs;
use std::io::Write;
use std::path::Path;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, build_graph, BipartiteGraph, Manifest, Split};
use crate::embio::{self, EmbeddingMatrix};
use crate::eval::{self, EvalReport, Target};
use crate::init::{self, InitOptions, InitializedTables, Pooling, Strategy};
use crate::model::{self, Adam, AdamConfig, LossConfig, ModelState, TrainOptions};
use crate::{Error, Result};

pub use config::{RunConfig, Seeds, VALIDATION_CUTOFF};

/// Loads the raw log, applies k-core filtering and the leave-one-out split.
pub fn prepare(cfg: &RunConfig) -> Result<Manifest> {
    cfg.require_files(true, false)?;
    let path = cfg.interactions.as_deref().expect("checked above");
    let raw = data::load_interactions(path, cfg.format)?;
    let core = data::k_core_filter(&raw, cfg.k_core)?;
    info!(
        "{}: {} users, {} items, {} interactions after {}-core (raw {})",
        path.display(),
        core.n_users(),
        core.n_items(),
        core.len(),
        cfg.k_core,
        raw.len()
    );
    let split = data::leave_one_out_split(&core)?;
    Ok(Manifest::new(&core, split))
}

/// Reads `cfg.item_embeddings` and checks it against the prepared item index.
/// Returns `None` for the baseline strategy.
pub fn load_embeddings(cfg: &RunConfig, manifest: &Manifest) -> Result<Option<EmbeddingMatrix>> {
    if cfg.strategy == Strategy::Baseline {
        return Ok(None);
    }
    cfg.require_files(false, true)?;
    let m = embio::read_matrix(cfg.item_embeddings.as_deref().expect("checked above"))?;
    m.verify_alignment(&manifest.item_ids)?;
    Ok(Some(m))
}

/// Builds the initial tables that `cfg.strategy` asks for.
pub fn build_tables(
    cfg: &RunConfig,
    graph: &BipartiteGraph,
    llm: Option<&EmbeddingMatrix>,
) -> Result<InitializedTables> {
    let opts = InitOptions {
        strategy: cfg.strategy,
        dim: cfg.dim,
        pooling: cfg.pooling,
        rescale: cfg.rescale,
        seed: cfg.seeds.init,
    };
    Ok(init::initialize(&opts, llm, graph)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub validation_ndcg: f64,
}

/// Outcome of training with early stopping and testing the best state.
#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub state: ModelState,
    pub report: EvalReport,
    pub best_epoch: usize,
    pub best_validation_ndcg: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains from `tables`, keeping the state with the best validation NDCG@10
/// (epoch 0 is the untrained state), stopping after `patience` epochs without
/// improvement, then evaluates that state on the test items.
pub fn train_and_evaluate(
    cfg: &RunConfig,
    split: &Split,
    graph: &BipartiteGraph,
    tables: &InitializedTables,
) -> Result<TrainedRun> {
    cfg.validate()?;
    let mut state = ModelState::from_tables(tables, graph, cfg.layers)?;
    let mut adam = Adam::new(cfg.optimizer, &state);
    let opts = TrainOptions {
        batch_size: cfg.batch_size,
        loss: cfg.loss,
        freeze: cfg.freeze,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    let validate = |s: &ModelState| -> Result<f64> {
        let r = eval::evaluate(&model::propagate(s), split, Target::Validation, &[VALIDATION_CUTOFF])?;
        Ok(r.ndcg[0])
    };

    let mut best = (0usize, validate(&state)?, state.clone());
    let mut history = vec![EpochRecord {
        epoch: 0,
        loss: f64::NAN,
        validation_ndcg: best.1,
    }];
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        let stats = model::train_epoch(&mut state, &mut adam, graph, &opts, &mut rng)?;
        let ndcg = validate(&state)?;
        debug!("epoch {epoch}: loss {:.5} val ndcg@10 {ndcg:.5}", stats.mean_loss);
        history.push(EpochRecord {
            epoch,
            loss: stats.mean_loss,
            validation_ndcg: ndcg,
        });
        if ndcg > best.1 {
            best = (epoch, ndcg, state.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_validation_ndcg, state) = best;
    let report = eval::full_rank_eval(&model::propagate(&state), split, &cfg.report_cutoffs())?;
    report.check_invariants()?;
    info!(
        "{} K={}: best epoch {best_epoch}, val ndcg@10 {best_validation_ndcg:.5}, test ndcg@10 {:.5}",
        tables.strategy,
        tables.dim(),
        report.ndcg_at(VALIDATION_CUTOFF).unwrap_or(0.0)
    );
    Ok(TrainedRun {
        state,
        report,
        best_epoch,
        best_validation_ndcg,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct MainOutcome {
    pub report: EvalReport,
    /// `(M + I) * K` embedding parameters.
    pub parameter_count: usize,
    pub run: TrainedRun,
}

/// `(M + I) * K`.
pub fn parameter_count(n_users: usize, n_items: usize, dim: usize) -> usize {
    (n_users + n_items) * dim
}

/// Initialize, train with early stopping, and test.
pub fn run_main(cfg: &RunConfig, split: &Split, llm: Option<&EmbeddingMatrix>) -> Result<MainOutcome> {
    let graph = build_graph(split);
    let tables = build_tables(cfg, &graph, llm)?;
    let run = train_and_evaluate(cfg, split, &graph, &tables)?;
    Ok(MainOutcome {
        report: run.report.clone(),
        parameter_count: parameter_count(split.n_users, split.n_items, tables.dim()),
        run,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dim: usize,
    pub params: usize,
    pub recall: f64,
    pub ndcg: f64,
}

/// One randomly initialized run per `cfg.sweep` dimension, in order.
pub fn run_size_sweep(cfg: &RunConfig, split: &Split) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    cfg.sweep
        .iter()
        .map(|&dim| {
            let run_cfg = RunConfig {
                strategy: Strategy::Baseline,
                dim,
                ..cfg.clone()
            };
            let out = run_main(&run_cfg, split, None)?;
            Ok(SweepRow {
                dim,
                params: out.parameter_count,
                recall: out.report.recall_at(VALIDATION_CUTOFF).expect("cutoff present"),
                ndcg: out.report.ndcg_at(VALIDATION_CUTOFF).expect("cutoff present"),
            })
        })
        .collect()
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut out = String::from("K,params,recall@10,ndcg@10\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.dim,
            r.params,
            eval::round_sig6(r.recall),
            eval::round_sig6(r.ndcg)
        ));
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Baseline and seeded-initialization reports trained on the same split.
#[derive(Clone, Debug)]
pub struct Arms {
    pub baseline: EvalReport,
    pub llminit: EvalReport,
}

impl Arms {
    /// `(llminit - baseline) / baseline` for Recall@K and NDCG@K. Infinite
    /// when the baseline metric is zero and the other is not.
    pub fn gains(&self, k: usize) -> (f64, f64) {
        let rel = |b: f64, l: f64| if b == 0.0 && l == 0.0 { 0.0 } else { (l - b) / b };
        (
            rel(
                self.baseline.recall_at(k).unwrap_or(0.0),
                self.llminit.recall_at(k).unwrap_or(0.0),
            ),
            rel(
                self.baseline.ndcg_at(k).unwrap_or(0.0),
                self.llminit.ndcg_at(k).unwrap_or(0.0),
            ),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainRow {
    pub regime: &'static str,
    pub metric: &'static str,
    pub baseline: f64,
    pub llminit: f64,
    pub gain: f64,
}

#[derive(Clone, Debug)]
pub struct ColdStartOutcome {
    pub fraction: f64,
    pub full: Arms,
    pub perturbed: Arms,
}

impl ColdStartOutcome {
    pub fn gain_table(&self) -> Vec<GainRow> {
        let k = VALIDATION_CUTOFF;
        let mut rows = Vec::new();
        for (regime, arms) in [("full", &self.full), ("coldstart", &self.perturbed)] {
            let (gr, gn) = arms.gains(k);
            rows.push(GainRow {
                regime,
                metric: "recall@10",
                baseline: arms.baseline.recall_at(k).unwrap_or(0.0),
                llminit: arms.llminit.recall_at(k).unwrap_or(0.0),
                gain: gr,
            });
            rows.push(GainRow {
                regime,
                metric: "ndcg@10",
                baseline: arms.baseline.ndcg_at(k).unwrap_or(0.0),
                llminit: arms.llminit.ndcg_at(k).unwrap_or(0.0),
                gain: gn,
            });
        }
        rows
    }
}

fn run_arms(cfg: &RunConfig, split: &Split, llm: Option<&EmbeddingMatrix>) -> Result<Arms> {
    let baseline_cfg = RunConfig {
        strategy: Strategy::Baseline,
        ..cfg.clone()
    };
    Ok(Arms {
        baseline: run_main(&baseline_cfg, split, None)?.report,
        llminit: run_main(cfg, split, llm)?.report,
    })
}

/// Trains baseline and `cfg.strategy` on the full split and on a copy with
/// `cfg.coldstart_fraction` of each user's train edges removed. Both are
/// tested on the unchanged test items. A zero fraction reuses the full-data
/// reports.
pub fn run_coldstart(cfg: &RunConfig, split: &Split, llm: Option<&EmbeddingMatrix>) -> Result<ColdStartOutcome> {
    if cfg.strategy == Strategy::Baseline {
        return Err(Error::Config(
            "coldstart compares a seeded strategy against the baseline; strategy is `baseline`".into(),
        ));
    }
    cfg.validate()?;
    let full = run_arms(cfg, split, llm)?;
    let perturbed = if cfg.coldstart_fraction > 0.0 {
        let thinned = data::coldstart_perturb(split, cfg.coldstart_fraction, cfg.seeds.data)?;
        run_arms(cfg, &thinned, llm)?
    } else {
        full.clone()
    };
    Ok(ColdStartOutcome {
        fraction: cfg.coldstart_fraction,
        full,
        perturbed,
    })
}

pub fn write_gain_csv(rows: &[GainRow], path: &Path) -> Result<()> {
    let mut out = String::from("regime,metric,baseline,llminit,gain\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.regime,
            r.metric,
            eval::round_sig6(r.baseline),
            eval::round_sig6(r.llminit),
            eval::round_sig6(r.gain)
        ));
    }
    fs::write(path, out).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub const USER_TABLE_FILE: &str = "user.lmi";
pub const ITEM_TABLE_FILE: &str = "item.lmi";
pub const MODEL_META_FILE: &str = "model.json";

/// Metadata stored next to checkpoint tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layers: usize,
    pub dim: usize,
    pub loss: LossConfig,
    pub optimizer: AdamConfig,
    pub seeds: Seeds,
    pub strategy: Strategy,
    pub pooling: Option<Pooling>,
    pub best_epoch: usize,
    pub best_validation_ndcg: f64,
    pub parameter_count: usize,
}

impl CheckpointMeta {
    pub fn new(cfg: &RunConfig, tables: &InitializedTables, run: &TrainedRun) -> Self {
        Self {
            layers: cfg.layers,
            dim: tables.dim(),
            loss: cfg.loss,
            optimizer: cfg.optimizer,
            seeds: cfg.seeds,
            strategy: tables.strategy,
            pooling: tables.pooling,
            best_epoch: run.best_epoch,
            best_validation_ndcg: run.best_validation_ndcg,
            parameter_count: run.state.parameter_count(),
        }
    }
}

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes the layer-0 tables as `LMI1` files plus `model.json`.
pub fn write_checkpoint(dir: &Path, state: &ModelState, meta: &CheckpointMeta, manifest: &Manifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))?;
    let users = state
        .user_matrix()?
        .with_index_checksum(embio::index_checksum(&manifest.user_ids));
    let items = state
        .item_matrix()?
        .with_index_checksum(embio::index_checksum(&manifest.item_ids));
    embio::write_matrix(&users, &dir.join(USER_TABLE_FILE))?;
    embio::write_matrix(&items, &dir.join(ITEM_TABLE_FILE))?;
    let path = dir.join(MODEL_META_FILE);
    let mut f = fs::File::create(&path).map_err(io_error(&path))?;
    let json = serde_json::to_string_pretty(meta).expect("meta serializes");
    writeln!(f, "{json}").map_err(io_error(&path))
}

/// Reads a checkpoint back and rebuilds the model over `manifest`'s train graph.
pub fn read_checkpoint(dir: &Path, manifest: &Manifest) -> Result<(ModelState, CheckpointMeta)> {
    let path = dir.join(MODEL_META_FILE);
    let text = fs::read_to_string(&path).map_err(io_error(&path))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let users = embio::read_matrix(&dir.join(USER_TABLE_FILE))?;
    let items = embio::read_matrix(&dir.join(ITEM_TABLE_FILE))?;
    users.verify_alignment(&manifest.user_ids)?;
    items.verify_alignment(&manifest.item_ids)?;
    let graph = build_graph(&manifest.split);
    let state = ModelState::from_matrices(&users, &items, &graph, meta.layers)?;
    Ok((state, meta))
}
