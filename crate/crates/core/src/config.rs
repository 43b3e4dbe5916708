//! Pipeline configuration: one TOML file plus `dotted.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::counter::CounterConfig;
use crate::error::{Error, Result};
use crate::errpred::ErrPredConfig;
use crate::pool::{PoolGenerator, TopK};
use crate::prototype::PrototypeSource;
use crate::rng::derive_seed;
use crate::select::ProposalConfig;
use crate::synth::{DatasetConfig, Split};
use crate::vae::VaeConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    /// Embeddings requested from the provider per class.
    pub size: usize,
    /// Top-ranked pool members averaged into the prototype.
    pub k: TopK,
    /// Directory of `<class>.pool` files; the synthetic generator when unset.
    pub dir: Option<PathBuf>,
    /// External command `[program, args...]` called with `<class> <output>`.
    pub plugin: Option<Vec<String>>,
    /// Synthetic generator used when neither `dir` nor `plugin` is set.
    pub generator: PoolGenerator,
    /// Objects embedded per generated scene (scene-objects generator).
    pub per_scene: usize,
    /// Rank the pool against only the `q` highest-objectness proposals of
    /// the query image; all proposals when unset.
    pub query_top: Option<usize>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            size: 100,
            k: TopK::Count(5),
            dir: None,
            plugin: None,
            generator: PoolGenerator::default(),
            per_scene: 5,
            query_top: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub split: Split,
    /// Rows of the table; the top-level settings when empty.
    pub sources: Vec<PrototypeSource>,
    pub n_values: Vec<usize>,
    pub s_values: Vec<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            split: Split::Test,
            sources: Vec::new(),
            n_values: Vec::new(),
            s_values: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub split: Split,
    pub n_values: Vec<usize>,
    pub k_values: Vec<TopK>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            split: Split::Val,
            n_values: vec![5, 10, 15, 20],
            k_values: vec![TopK::Count(5), TopK::Count(25), TopK::Count(50), TopK::All],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Root seed; every module draws from a named substream of it.
    pub seed: u64,
    /// Dataset root holding `manifest.txt`.
    pub data_dir: PathBuf,
    /// Checkpoints, logs, tables and exported images.
    pub out_dir: PathBuf,
    /// Worker threads (0 = one per core).
    pub workers: usize,
    pub prototype_source: PrototypeSource,
    /// Class-relevant patches kept per image.
    pub n: usize,
    /// Exemplars finally used for counting.
    pub s: usize,
    /// Semantic embedding file; built-in synthetic attributes when unset.
    pub semantic_file: Option<PathBuf>,
    /// Mask the density with the exemplar heatmap at this normalised
    /// threshold (multi-class scenes); disabled when unset.
    pub heatmap_threshold: Option<f64>,
    /// Ridge strength for the semantic-to-selection-space alignment.
    pub alignment_ridge: f64,
    pub dataset: DatasetConfig,
    pub counter: CounterConfig,
    pub vae: VaeConfig,
    pub errpred: ErrPredConfig,
    pub proposals: ProposalConfig,
    pub pool: PoolConfig,
    pub evaluate: EvaluateConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            workers: 0,
            prototype_source: PrototypeSource::Pool,
            n: 10,
            s: 3,
            semantic_file: None,
            heatmap_threshold: None,
            alignment_ridge: 1e-2,
            dataset: DatasetConfig::default(),
            counter: CounterConfig::default(),
            vae: VaeConfig::default(),
            errpred: ErrPredConfig::default(),
            proposals: ProposalConfig::default(),
            pool: PoolConfig::default(),
            evaluate: EvaluateConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()))
}

/// Applies `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = root;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg.with_derived_seeds())
    }

    /// Loads `path` (defaults only when `None`) and applies the overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        if self.n == 0 {
            return bad("n must be >= 1");
        }
        if self.s == 0 {
            return bad("s must be >= 1");
        }
        if self.pool.query_top == Some(0) {
            return bad("pool.query_top must be >= 1");
        }
        if self.pool.per_scene == 0 {
            return bad("pool.per_scene must be >= 1");
        }
        if self.pool.size == 0 {
            return bad("pool.size must be >= 1");
        }
        if let TopK::Count(k) = self.pool.k {
            if k == 0 || k > self.pool.size {
                return bad("pool.k must be in 1..=pool.size or \"all\"");
            }
        }
        if self.counter.epochs == 0 || self.counter.batch_size == 0 {
            return bad("counter.epochs and counter.batch_size must be >= 1");
        }
        if !(self.counter.density_scale.is_finite() && self.counter.density_scale > 0.0) {
            return bad("counter.density_scale must be positive");
        }
        if self.counter.max_exemplars == 0 {
            return bad("counter.max_exemplars must be >= 1");
        }
        if self.counter.backbone.feature_dim != self.vae.feature_dim {
            return bad("vae.feature_dim must equal counter.backbone.feature_dim");
        }
        if self.proposals.max_proposals == 0 {
            return bad("proposals.max_proposals must be >= 1");
        }
        if let Some(t) = self.heatmap_threshold {
            if !t.is_finite() {
                return bad("heatmap_threshold must be finite");
            }
        }
        self.dataset.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Fills every module seed from the root seed.
    pub fn with_derived_seeds(mut self) -> Self {
        self.counter.seed = derive_seed(self.seed, "counter");
        self.vae.seed = derive_seed(self.seed, "vae");
        self.errpred.seed = derive_seed(self.seed, "errpred");
        self.proposals.seed = derive_seed(self.seed, "proposals");
        self
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        *self = self.clone().with_derived_seeds();
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir.join("manifest.txt")
    }

    pub fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}
