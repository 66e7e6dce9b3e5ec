//! Run configuration for `rws train`, read from TOML.
//!
//! ```toml
//! arch = "SBN/SBN 4-16"
//! out = "runs/bars"
//!
//! [data.bars]
//! side = 3
//! n_train = 8000
//! n_valid = 1000
//!
//! [train]
//! k_train = 5
//! learning_rate = 0.003
//! momentum = 0.95
//! batch_size = 25
//! q_update_mode = "both"
//! lr_decay_per_epoch = 1.0
//! epochs = 200
//! seed = 0
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use rws::data::{load_amat, make_bars_dataset, BinaryDataset, Split};
use rws::{ModelSpec, RngStream, TrainConfig};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Architecture string, e.g. `"SBN/NADE 10-200-200"` (latent widths top
    /// layer first).
    pub arch: String,
    /// Hidden width of any NADE layer.
    #[serde(default)]
    pub nade_hidden: usize,
    /// Output directory; `--out` overrides it.
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Samples per datapoint for the per-epoch validation estimate.
    #[serde(default = "default_valid_k")]
    pub valid_k: usize,
    /// Samples held in memory at once per datapoint during validation.
    #[serde(default = "default_chunk")]
    pub chunk: usize,
    /// Record wall-clock seconds in metrics.csv. Off by default so that a
    /// rerun writes byte-identical files.
    #[serde(default)]
    pub record_wall_time: bool,
    pub data: DataConfig,
    pub train: TrainConfig,
}

fn default_valid_k() -> usize {
    1000
}

fn default_chunk() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// amat files; relative paths resolve against the config file's directory.
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub valid: Option<PathBuf>,
    /// Generate a bars dataset instead of reading files.
    #[serde(default)]
    pub bars: Option<BarsConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarsConfig {
    pub side: usize,
    pub n_train: usize,
    #[serde(default)]
    pub n_valid: usize,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.valid);
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    /// Everything that can be checked without touching data or computing.
    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.train.validate()?;
        if self.valid_k == 0 || self.chunk == 0 {
            bail!("valid_k and chunk must be at least 1");
        }
        match (&self.data.train, &self.data.bars) {
            (Some(_), Some(_)) => bail!("[data] sets both `train` and `bars`; choose one"),
            (None, None) => bail!("[data] needs either a `train` path or a `bars` table"),
            (None, Some(_)) if self.data.valid.is_some() => {
                bail!("[data] `valid` cannot be combined with `bars`; use bars.n_valid")
            }
            _ => {}
        }
        if let Some(b) = &self.data.bars {
            if b.n_train == 0 {
                bail!("bars.n_train must be at least 1");
            }
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::parse(&self.arch, self.nade_hidden)?)
    }

    /// Training set and optional validation set.
    pub fn load_data(&self) -> Result<(BinaryDataset, Option<BinaryDataset>)> {
        if let Some(b) = &self.data.bars {
            let all = make_bars_dataset(
                b.side,
                b.n_train + b.n_valid,
                &mut RngStream::new(b.seed, 0),
            )?;
            if b.n_valid == 0 {
                return Ok((all, None));
            }
            let (train, valid) = all.split_at(b.n_train, Split::Train, Split::Valid)?;
            return Ok((train, Some(valid)));
        }
        let train_path = self.data.train.as_ref().expect("validated");
        let train = load_amat(train_path, Split::Train)
            .with_context(|| format!("loading {}", train_path.display()))?;
        let valid = match &self.data.valid {
            Some(v) => {
                let ds = load_amat(v, Split::Valid)
                    .with_context(|| format!("loading {}", v.display()))?;
                if ds.width() != train.width() {
                    bail!(
                        "validation data has {} columns but training data has {}",
                        ds.width(),
                        train.width()
                    );
                }
                Some(ds)
            }
            None => None,
        };
        Ok((train, valid))
    }
}
