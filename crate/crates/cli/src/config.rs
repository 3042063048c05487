//! Plain-text run configuration: `[section]` headers and `key = value`
//! lines, with every effective value echoed back out so a run directory
//! always carries its exact provenance.

use oae_core::data::AugmentFlags;
use oae_core::geometry::OcclusionStrategy;
use oae_core::pipeline::{LossKind, Schedule, TrainConfig};
use oae_core::transformer::ModelConfig;

use crate::errors::CliError;

/// Synthetic dataset knobs (split totals across the five classes).
#[derive(Debug, Clone)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub jitter: f64,
    pub data_seed: u64,
}

impl DataConfig {
    pub fn desk() -> Self {
        Self {
            train_count: 512,
            test_count: 128,
            jitter: 0.0,
            data_seed: 77,
        }
    }
}

/// The full effective configuration of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            data: DataConfig::desk(),
        }
    }

    /// Applies one `key = value` assignment. The decoder width is
    /// derived (3 × patch_size), not a key.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), CliError> {
        let bad = |what: &str, value: &str, detail: String| {
            CliError::Usage(format!("bad {what} `{value}`: {detail}"))
        };
        macro_rules! parse {
            ($what:expr, $ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|e| bad($what, value, e.to_string()))?
            };
        }
        match (section, key) {
            ("model", "n_points") => self.model.n_points = parse!("n_points", usize),
            ("model", "groups") => self.model.groups = parse!("groups", usize),
            ("model", "patch_size") => {
                self.model.patch_size = parse!("patch_size", usize);
                self.model.dec_channels = 3 * self.model.patch_size;
            }
            ("model", "enc_channels") => self.model.enc_channels = parse!("enc_channels", usize),
            ("model", "enc_depth") => self.model.enc_depth = parse!("enc_depth", usize),
            ("model", "dec_depth") => self.model.dec_depth = parse!("dec_depth", usize),
            ("model", "heads") => self.model.heads = parse!("heads", usize),
            ("model", "mlp_ratio") => self.model.mlp_ratio = parse!("mlp_ratio", usize),
            ("model", "embed_hidden") => self.model.embed_hidden = parse!("embed_hidden", usize),
            ("model", "init_std") => self.model.init_std = parse!("init_std", f64),
            ("model", "zero_init_ffn") => {
                self.model.zero_init_ffn = match value {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(bad("zero_init_ffn", other, "expected `on` or `off`".into()));
                    }
                }
            }
            ("train", "lr") => self.train.lr = parse!("lr", f64),
            ("train", "weight_decay") => self.train.weight_decay = parse!("weight_decay", f64),
            ("train", "batch_size") => self.train.batch_size = parse!("batch_size", usize),
            ("train", "epochs") => self.train.epochs = parse!("epochs", usize),
            ("train", "warmup_epochs") => self.train.warmup_epochs = parse!("warmup_epochs", usize),
            ("train", "schedule") => self.train.schedule = parse!("schedule", Schedule),
            ("train", "ratio") => self.train.ratio = parse!("ratio", f64),
            ("train", "strategy") => self.train.strategy = parse!("strategy", OcclusionStrategy),
            ("train", "loss") => self.train.loss = parse!("loss", LossKind),
            ("train", "seed") => self.train.rng_seed = parse!("seed", u64),
            ("train", "augment") => {
                self.train.augment = match value {
                    "on" => AugmentFlags::all(),
                    "off" => AugmentFlags::none(),
                    other => {
                        return Err(bad("augment", other, "expected `on` or `off`".into()));
                    }
                }
            }
            ("data", "train_count") => self.data.train_count = parse!("train_count", usize),
            ("data", "test_count") => self.data.test_count = parse!("test_count", usize),
            ("data", "jitter") => self.data.jitter = parse!("jitter", f64),
            ("data", "data_seed") => self.data.data_seed = parse!("data_seed", u64),
            _ => {
                return Err(CliError::Usage(format!(
                    "unknown config key `{key}` in section [{section}]"
                )));
            }
        }
        Ok(())
    }

    /// Applies a whole config file. Lines are `key = value`, `#`
    /// comments, blank lines, and `[model]` / `[train]` / `[data]`
    /// section headers; keys outside a section and unknown keys are
    /// rejected by line number.
    pub fn apply_file(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        let mut section: Option<String> = None;
        for (ix, raw) in text.lines().enumerate() {
            let line_no = ix + 1;
            let at = |msg: String| CliError::Usage(format!("{origin}:{line_no}: {msg}"));
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                match name {
                    "model" | "train" | "data" => section = Some(name.to_string()),
                    other => return Err(at(format!("unknown section `[{other}]`"))),
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(at(format!("expected `key = value`, found `{line}`")));
            };
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(at(format!("key `{key}` has no value")));
            }
            let Some(section) = section.as_deref() else {
                return Err(at(format!(
                    "key `{key}` appears before any [section] header"
                )));
            };
            self.set(section, key, value)
                .map_err(|e| at(e.message().to_string()))?;
        }
        Ok(())
    }

    /// Renders every effective value; parsing the result back yields an
    /// identical configuration (all numbers print shortest-round-trip).
    pub fn render(&self) -> String {
        let augment = if self.train.augment.rotate
            && self.train.augment.scale
            && self.train.augment.translate
            && self.train.augment.jitter
        {
            "on"
        } else {
            "off"
        };
        format!(
            "[model]\n\
             n_points = {}\n\
             groups = {}\n\
             patch_size = {}\n\
             enc_channels = {}\n\
             enc_depth = {}\n\
             dec_depth = {}\n\
             heads = {}\n\
             mlp_ratio = {}\n\
             embed_hidden = {}\n\
             init_std = {}\n\
             zero_init_ffn = {}\n\
             \n\
             [train]\n\
             lr = {}\n\
             weight_decay = {}\n\
             batch_size = {}\n\
             epochs = {}\n\
             warmup_epochs = {}\n\
             schedule = {}\n\
             ratio = {}\n\
             strategy = {}\n\
             loss = {}\n\
             seed = {}\n\
             augment = {}\n\
             \n\
             [data]\n\
             train_count = {}\n\
             test_count = {}\n\
             jitter = {}\n\
             data_seed = {}\n",
            self.model.n_points,
            self.model.groups,
            self.model.patch_size,
            self.model.enc_channels,
            self.model.enc_depth,
            self.model.dec_depth,
            self.model.heads,
            self.model.mlp_ratio,
            self.model.embed_hidden,
            self.model.init_std,
            if self.model.zero_init_ffn { "on" } else { "off" },
            self.train.lr,
            self.train.weight_decay,
            self.train.batch_size,
            self.train.epochs,
            self.train.warmup_epochs,
            self.train.schedule.name(),
            self.train.ratio,
            self.train.strategy.name(),
            self.train.loss.name(),
            self.train.rng_seed,
            augment,
            self.data.train_count,
            self.data.test_count,
            self.data.jitter,
            self.data.data_seed,
        )
    }

    /// Validates the composite configuration (usage errors).
    pub fn validate(&self) -> Result<(), CliError> {
        self.model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if !self.data.jitter.is_finite() || self.data.jitter < 0.0 {
            return Err(CliError::Usage(format!(
                "jitter {} must be finite and non-negative",
                self.data.jitter
            )));
        }
        Ok(())
    }
}
