//! TOML run configuration and `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{scan_corpus, scan_dir, synthetic_badge, write_synthetic_corpus, BadgeSet, Corpus, Split};
use crate::error::{Error, Result};
use crate::losses::PerceptualBackend;
use crate::models::ModelConfig;
use crate::training::TrainConfig;

/// Every key accepted in a config file or by `--set`, in dotted form.
pub const CONFIG_KEYS: &[&str] = &[
    "output_dir",
    "model.base_channels",
    "model.depth",
    "model.pre_encoder_layers",
    "model.stn_hidden",
    "model.image_side",
    "model.alpha",
    "model.epsilon",
    "model.head_gain",
    "train.lr",
    "train.batch_size",
    "train.total_steps",
    "train.warmup_steps",
    "train.seed",
    "train.checkpoint_every",
    "train.weights.lambda1",
    "train.weights.lambda2",
    "train.robustness.probabilities.none",
    "train.robustness.probabilities.jpeg",
    "train.robustness.probabilities.blur",
    "train.robustness.probabilities.jitter",
    "train.robustness.jpeg_quality",
    "train.robustness.blur_kernels",
    "train.robustness.brightness",
    "train.robustness.contrast",
    "train.robustness.saturation",
    "train.robustness.hue",
    "data.corpus",
    "data.split",
    "data.badges",
    "data.synthetic_hosts",
    "data.synthetic_badges",
    "data.synthetic_seed",
    "backend.weights",
    "eval.text",
    "eval.font_size",
];

/// Where hosts and badges come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Host directory; with `split`, images are read from `<corpus>/<split>`.
    pub corpus: Option<PathBuf>,
    pub split: Option<Split>,
    pub badges: Vec<PathBuf>,
    /// When no corpus is given, this many procedural hosts are generated under
    /// `<output_dir>/corpus`.
    pub synthetic_hosts: usize,
    /// When no badge paths are given, this many procedural badges are used.
    pub synthetic_badges: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            split: None,
            badges: Vec::new(),
            synthetic_hosts: 0,
            synthetic_badges: 1,
            synthetic_seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    /// Pretrained perceptual weights; the deterministic backend when absent.
    pub weights: Option<PathBuf>,
}

/// Text-overlay control parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub text: String,
    pub font_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            text: "ACM MM 2023".into(),
            font_size: 18,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            backend: BackendConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words that are not TOML literals are taken as strings
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies one `key=value` override to a parsed config table.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if !CONFIG_KEYS.contains(&key) {
        return Err(Error::Config(format!("unknown config key {key:?}")));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("config key {key:?} crosses a non-table value")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn unknown_key(table: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in table {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) if !CONFIG_KEYS.contains(&path.as_str()) => {
                if !CONFIG_KEYS.iter().any(|c| c.starts_with(&format!("{path}."))) {
                    return Some(path);
                }
                if let Some(bad) = unknown_key(t, &path) {
                    return Some(bad);
                }
            }
            _ if !CONFIG_KEYS.contains(&path.as_str()) => return Some(path),
            _ => {}
        }
    }
    None
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(key) = unknown_key(&table, "") {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            cfg.resolve_relative(base);
        }
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(c) = self.data.corpus.as_mut() {
            fix(c);
        }
        self.data.badges.iter_mut().for_each(fix);
        if let Some(w) = self.backend.weights.as_mut() {
            fix(w);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.corpus.is_none() && self.data.synthetic_hosts == 0 {
            return Err(Error::Config("set data.corpus or data.synthetic_hosts".into()));
        }
        if self.data.badges.is_empty() && self.data.synthetic_badges == 0 {
            return Err(Error::Config("set data.badges or data.synthetic_badges".into()));
        }
        if self.eval.font_size == 0 {
            return Err(Error::Config("eval.font_size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The training corpus, generating procedural hosts when configured to.
    pub fn corpus(&self) -> Result<Corpus> {
        match (&self.data.corpus, self.data.split) {
            (Some(root), Some(split)) => scan_corpus(root, split),
            (Some(root), None) => scan_dir(root),
            (None, _) => write_synthetic_corpus(
                self.output_dir.join("corpus"),
                self.data.synthetic_hosts,
                self.model.image_side,
                self.data.synthetic_seed,
            ),
        }
    }

    pub fn badges(&self) -> Result<BadgeSet> {
        if self.data.badges.is_empty() {
            BadgeSet::new(
                (0..self.data.synthetic_badges)
                    .map(|i| synthetic_badge(self.model.image_side, i))
                    .collect(),
            )
        } else {
            BadgeSet::load(&self.data.badges, self.model.image_side)
        }
    }

    pub fn backend(&self) -> Result<PerceptualBackend> {
        PerceptualBackend::from_weights(self.backend.weights.as_deref())
    }
}
