//! Run configuration shared by the command-line tools.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kvcache::KvMode;
use crate::model::{Model, ModelSpec, ShareStrategy};
use crate::routing::{RouterConfig, RouterKind};
use crate::train::{data, Corpus, TrainConfig};

pub const SEED_ENV: &str = "RECURSOR_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    #[serde(default)]
    pub router: Option<RouterConfig>,
    #[serde(default)]
    pub kv_mode: KvMode,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "Corpus::copy_default")]
    pub data: Corpus,
    /// Steps between intermediate checkpoints; zero keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs/default")
}

fn field(name: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::Config(format!("{name}: {m}")),
        Error::Capacity { requested, available } => {
            Error::Config(format!("{name}: {requested} recursions need at least as many tokens, got {available}"))
        }
        e => Error::Config(format!("{name}: {e}")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Loads and validates; a relative output directory resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::parse(&text)?;
        if cfg.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.output_dir = dir.join(&cfg.output_dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// `RECURSOR_SEED`, when set, replaces the configured seed.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}: `{v}` is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let spec = &self.model;
        spec.validate().map_err(|e| field("model", e))?;
        if let Some(r) = &self.router {
            r.validate().map_err(|e| field("router", e))?;
            if spec.n_recursions < 2 || spec.share == ShareStrategy::None {
                return Err(Error::Config("router: routing needs a shared block and at least two recursions".into()));
            }
            if r.kind == RouterKind::ExpertChoice {
                crate::routing::capacity_schedule(spec.n_recursions, self.train.seq_len).map_err(|e| field("train.seq_len", e))?;
            }
        }
        match self.kv_mode {
            KvMode::RecursionWise | KvMode::RecursionWiseHybrid if self.router.is_none() => {
                return Err(Error::Config("kv_mode: recursion-wise caching needs a router".into()));
            }
            KvMode::RecursiveShare if spec.n_recursions < 2 => {
                return Err(Error::Config("kv_mode: recursive sharing needs at least two recursions".into()));
            }
            _ => {}
        }
        self.data.validate().map_err(|e| field("data", e))?;
        if spec.vocab < data::VOCAB {
            return Err(Error::Config(format!("model.vocab: {} is below the byte vocabulary {}", spec.vocab, data::VOCAB)));
        }
        self.train.validate(spec, self.router.as_ref()).map_err(|e| field("train", e))?;
        Ok(())
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::init(&self.model, self.router.clone(), self.kv_mode, self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub fn hash_json<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("serialisable config");
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// First line of every line-delimited output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}
