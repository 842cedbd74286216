use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::InputFormat;
use crate::init::{Pooling, Rescale, Strategy};
use crate::model::{AdamConfig, LossConfig};
use crate::{Error, Result};

/// Early stopping watches NDCG at this cutoff on the validation items.
pub const VALIDATION_CUTOFF: usize = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    /// Cold-start edge removal.
    pub data: u64,
    /// Random index selection and the random baseline tables.
    pub init: u64,
    /// Negative sampling, shuffling and SGL views.
    pub train: u64,
}

/// Everything a run needs. Unset fields take the documented defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Raw `user, item, timestamp` log, consumed by `prepare`.
    pub interactions: Option<PathBuf>,
    pub format: InputFormat,
    pub k_core: usize,
    /// `LMI1` item matrix aligned to the prepared item index.
    pub item_embeddings: Option<PathBuf>,
    /// All outputs go under this directory.
    pub run_dir: PathBuf,

    pub strategy: Strategy,
    pub pooling: Pooling,
    pub rescale: Rescale,
    pub dim: usize,

    pub layers: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
    pub freeze: bool,

    pub max_epochs: usize,
    pub patience: usize,
    pub cutoffs: Vec<usize>,
    pub seeds: Seeds,

    pub sweep: Vec<usize>,
    pub coldstart_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            format: InputFormat::Tsv,
            k_core: 5,
            item_embeddings: None,
            run_dir: PathBuf::from("runs/default"),
            strategy: Strategy::Var,
            pooling: Pooling::Mean,
            rescale: Rescale::None,
            dim: 128,
            layers: 3,
            batch_size: 2048,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
            freeze: false,
            max_epochs: 500,
            patience: 10,
            cutoffs: vec![10, 20],
            seeds: Seeds::default(),
            sweep: (4..=12).map(|p| 1usize << p).collect(),
            coldstart_fraction: 0.5,
        }
    }
}

impl RunConfig {
    /// Reads a `.json` file, or TOML for any other extension.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.dim == 0 {
            return bad("dim must be positive");
        }
        if self.k_core == 0 {
            return bad("k_core must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return bad("cutoffs must be non-empty and positive");
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return bad("optimizer.lr must be positive");
        }
        if !(0.0..1.0).contains(&self.coldstart_fraction) {
            return bad("coldstart_fraction must lie in [0, 1)");
        }
        if self.sweep.windows(2).any(|w| w[0] >= w[1]) || self.sweep.contains(&0) {
            return bad("sweep must be strictly ascending positive dimensions");
        }
        self.loss.validate()?;
        Ok(())
    }

    /// Checks that the input files this command needs exist.
    pub fn require_files(&self, interactions: bool, embeddings: bool) -> Result<()> {
        let check = |p: &Option<PathBuf>, key: &str| match p {
            Some(p) if p.is_file() => Ok(()),
            Some(p) => Err(Error::Config(format!("{key}: {} does not exist", p.display()))),
            None => Err(Error::Config(format!("{key} is not set"))),
        };
        if interactions {
            check(&self.interactions, "interactions")?;
        }
        if embeddings && self.strategy != Strategy::Baseline {
            check(&self.item_embeddings, "item_embeddings")?;
        }
        Ok(())
    }

    /// Cutoffs with the validation cutoff always present.
    pub fn report_cutoffs(&self) -> Vec<usize> {
        let mut c = self.cutoffs.clone();
        c.push(VALIDATION_CUTOFF);
        c.sort_unstable();
        c.dedup();
        c
    }
}
