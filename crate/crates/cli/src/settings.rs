//! Layered run configuration: built-in defaults < `--config` TOML < flags.

use std::path::{Path, PathBuf};

use clap::Args;
use ctxlm::context::{ContextRepr, ContextSource};
use ctxlm::corpus::SplitSpec;
use ctxlm::models::{Architecture, Attention, ModelConfig};
use ctxlm::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Architecture,
    pub attention: Attention,
    pub context_repr: ContextRepr,
    pub context_source: ContextSource,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Total context size f; 32 for learned embeddings and 8 for features when unset.
    pub context_dim: Option<usize>,
    pub factor_rank: usize,
    pub zero_gate: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            arch: Architecture::Default,
            attention: Attention::None,
            context_repr: ContextRepr::Learned,
            context_source: ContextSource::Datetime,
            embed_dim: 64,
            hidden_dim: 64,
            context_dim: None,
            factor_rank: 5,
            zero_gate: true,
        }
    }
}

impl ModelSection {
    /// Model config with vocabulary sizes left at zero.
    pub fn config(&self) -> ModelConfig {
        let mut c = ModelConfig::new(0, 0, self.arch, self.attention, self.context_repr);
        c.embed_dim = self.embed_dim;
        c.hidden_dim = self.hidden_dim;
        if let Some(f) = self.context_dim {
            c.context_dim = f;
        }
        c.factor_rank = self.factor_rank;
        c.context_source = self.context_source;
        c.zero_gate = self.zero_gate;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Train/dev/test percentages.
    pub split: [u32; 3],
    /// Defaults to the run seed.
    pub split_seed: Option<u64>,
    pub min_count: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            split: [90, 5, 5],
            split_seed: None,
            min_count: 1,
        }
    }
}

/// Contents of a `--config` file (TOML, or JSON when the name ends in `.json`).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        Ok(parsed.map_err(|e| UsageError(format!("{}: {e}", path.display())))?)
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelFlags {
    /// Model architecture: default, prepend, concat or factor
    #[arg(long)]
    pub arch: Option<Architecture>,
    /// Attention over the context set: none, word or hidden
    #[arg(long)]
    pub attention: Option<Attention>,
    /// Datetime representation: learned or feature
    #[arg(long)]
    pub context_repr: Option<ContextRepr>,
    /// Context signal: datetime, geo or prompt
    #[arg(long)]
    pub context_source: Option<ContextSource>,
    /// Word embedding size e [default: 64; full-scale runs use 512]
    #[arg(long)]
    pub embed_dim: Option<usize>,
    /// LSTM hidden size d [default: 64; full-scale runs use 512]
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Total context size f [default: 32 learned, 8 feature]
    #[arg(long)]
    pub context_dim: Option<usize>,
    /// Rank r of the factor bases [default: 5]
    #[arg(long)]
    pub rank: Option<usize>,
    /// Add an all-zero member to the feature context set under attention [default: true]
    #[arg(long)]
    pub zero_gate: Option<bool>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    /// Adam learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size [default: 32; full-scale runs use 256]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Number of Adam updates [default: 5000; full-scale runs use 400000]
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dev evaluation interval in steps [default: 250]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Utterances per scoring batch [default: 64]
    #[arg(long)]
    pub eval_batch_size: Option<usize>,
    /// Global gradient-norm clip [default: 5]
    #[arg(long, conflicts_with = "no_clip")]
    pub clip: Option<f64>,
    /// Disable gradient clipping
    #[arg(long)]
    pub no_clip: bool,
    /// Adam β1 [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam β2 [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam ε [default: 1e-8]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Check every intermediate value for NaN/Inf
    #[arg(long)]
    pub debug_checks: bool,
}

#[derive(Debug, Clone, Args)]
pub struct DataFlags {
    /// Train/dev/test percentages, e.g. 90,5,5
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<u32>>,
    /// Seed of the data split [default: the run seed]
    #[arg(long)]
    pub split_seed: Option<u64>,
    /// Minimum training count for a word to enter the vocabulary [default: 1]
    #[arg(long)]
    pub min_count: Option<u64>,
}

/// Flags shared by every command that trains.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// Corpus file (`timestamp<TAB>text[<TAB>key=value…]` per line)
    #[arg(long)]
    pub corpus: PathBuf,
    /// TOML file with [model], [train] and [data] tables (JSON if named *.json)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed; split, initialization and batching derive from it
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelFlags,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub data: DataFlags,
}

/// Everything a training run depends on, after layering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub corpus: PathBuf,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl RunSettings {
    pub fn resolve(flags: &RunFlags) -> anyhow::Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        let m = &flags.model;
        let model = &mut cfg.model;
        set(&mut model.arch, m.arch);
        set(&mut model.attention, m.attention);
        set(&mut model.context_repr, m.context_repr);
        set(&mut model.context_source, m.context_source);
        set(&mut model.embed_dim, m.embed_dim);
        set(&mut model.hidden_dim, m.hidden_dim);
        if m.context_dim.is_some() {
            model.context_dim = m.context_dim;
        }
        set(&mut model.factor_rank, m.rank);
        set(&mut model.zero_gate, m.zero_gate);

        let t = &flags.train;
        let train = &mut cfg.train;
        set(&mut train.learning_rate, t.lr);
        set(&mut train.batch_size, t.batch_size);
        set(&mut train.max_steps, t.steps);
        set(&mut train.eval_every, t.eval_every);
        set(&mut train.eval_batch_size, t.eval_batch_size);
        set(&mut train.beta1, t.beta1);
        set(&mut train.beta2, t.beta2);
        set(&mut train.epsilon, t.epsilon);
        if t.clip.is_some() {
            train.grad_clip_norm = t.clip;
        }
        if t.no_clip {
            train.grad_clip_norm = None;
        }
        train.debug_checks |= t.debug_checks;
        set(&mut train.seed, flags.seed);

        let d = &flags.data;
        if let Some(s) = &d.split {
            cfg.data.split = [s[0], s[1], s[2]];
        }
        if d.split_seed.is_some() {
            cfg.data.split_seed = d.split_seed;
        }
        set(&mut cfg.data.min_count, d.min_count);
        cfg.data.split_seed = Some(cfg.data.split_seed.unwrap_or(cfg.train.seed));

        let settings = RunSettings {
            corpus: flags.corpus.clone(),
            model: cfg.model,
            train: cfg.train,
            data: cfg.data,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        // vocabulary sizes come from the corpus; only the shape choices are checked here
        let mut config = self.model.config();
        config.vocab_size = 3;
        config.context_vocab_size = 1;
        config.validate().map_err(|e| UsageError(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| UsageError(e.to_string()))?;
        let r = self.data.split;
        if r.iter().sum::<u32>() != 100 || r.contains(&0) {
            return Err(UsageError(format!(
                "split percentages must be positive and sum to 100, got {r:?}"
            ))
            .into());
        }
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            ratios: self.data.split,
            seed: self.data.split_seed.unwrap_or(self.train.seed),
        }
    }

    /// The layered configuration as a standalone `--config` file.
    pub fn file_config(&self) -> FileConfig {
        FileConfig {
            model: self.model.clone(),
            train: self.train.clone(),
            data: self.data.clone(),
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}
