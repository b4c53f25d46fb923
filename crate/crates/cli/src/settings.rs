//! Flat `key = value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Later
//! assignments win, so command-line overrides are applied after the file.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use parn::attention::AttentionVariant;
use parn::conv::BnMode;
use parn::episode::{default_queries, Benchmark};
use parn::model::{ExtractorKind, ModelConfig};
use parn::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Omniglot,
    MiniImagenet,
    Synthetic,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Omniglot => "omniglot",
            DatasetKind::MiniImagenet => "mini-imagenet",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn benchmark(self) -> Benchmark {
        match self {
            DatasetKind::MiniImagenet => Benchmark::MiniImagenet,
            _ => Benchmark::Omniglot,
        }
    }
}

impl FromStr for DatasetKind {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            DatasetKind::Omniglot,
            DatasetKind::MiniImagenet,
            DatasetKind::Synthetic,
        ]
        .into_iter()
        .find(|d| d.name() == s)
        .ok_or_else(|| anyhow!("unknown dataset {s:?} (expected omniglot|mini-imagenet|synthetic)"))
    }
}

fn bn_name(m: BnMode) -> &'static str {
    match m {
        BnMode::Inference => "inference",
        BnMode::Training => "training",
    }
}

fn parse_bn(s: &str) -> Result<BnMode> {
    match s {
        "inference" => Ok(BnMode::Inference),
        "training" => Ok(BnMode::Training),
        _ => bail!("unknown batch-norm mode {s:?} (expected inference|training)"),
    }
}

fn parse_bool(s: &str) -> Result<bool> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => bail!("expected true or false, got {s:?}"),
    }
}

/// Every recognised key, in the order they are echoed.
pub const KEYS: &[&str] = &[
    "dataset",
    "dataset_root",
    "rotate_classes",
    "synthetic_classes",
    "synthetic_images",
    "synthetic_seed",
    "extractor",
    "attention",
    "channels",
    "relation_hidden",
    "embed_ratio",
    "warmup_episodes",
    "eval_bn",
    "seed",
    "way",
    "shot",
    "queries",
    "lr",
    "lr_decay_factor",
    "plateau_patience",
    "train_episodes",
    "eval_every",
    "eval_episodes",
    "test_episodes",
    "workers",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub dataset: DatasetKind,
    pub dataset_root: Option<PathBuf>,
    /// Add the 90°, 180° and 270° rotations of every Omniglot training class.
    pub rotate_classes: bool,
    pub synthetic_classes: usize,
    pub synthetic_images: usize,
    pub synthetic_seed: u64,
    pub extractor: ExtractorKind,
    pub attention: AttentionVariant,
    pub channels: usize,
    pub relation_hidden: usize,
    pub embed_ratio: usize,
    pub warmup_episodes: usize,
    pub eval_bn: BnMode,
    pub seed: u64,
    pub way: usize,
    pub shot: usize,
    /// `None` picks the benchmark's convention for the way and shot.
    pub queries: Option<usize>,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    pub train_episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub test_episodes: usize,
    pub workers: usize,
}

impl Default for Settings {
    fn default() -> Self {
        let m = ModelConfig::omniglot(ExtractorKind::Dfe4, AttentionVariant::Dca);
        let t = TrainConfig::default();
        Settings {
            dataset: DatasetKind::Omniglot,
            dataset_root: None,
            rotate_classes: true,
            synthetic_classes: 40,
            synthetic_images: 20,
            synthetic_seed: 0,
            extractor: m.extractor,
            attention: m.attention,
            channels: m.channels,
            relation_hidden: m.relation_hidden,
            embed_ratio: m.embed_ratio,
            warmup_episodes: m.warmup_episodes,
            eval_bn: m.eval_bn,
            seed: t.seed,
            way: t.way,
            shot: t.shot,
            queries: None,
            lr: t.lr,
            lr_decay_factor: t.lr_decay_factor,
            plateau_patience: t.plateau_patience,
            train_episodes: t.max_episodes,
            eval_every: t.eval_every,
            eval_episodes: t.eval_episodes,
            test_episodes: 600,
            workers: 1,
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| {
        anyhow!(
            "{key}: cannot parse {v:?} as a {}",
            std::any::type_name::<T>()
        )
    })
}

impl Settings {
    /// Assign one key. Unknown keys and badly typed values are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = v.parse()?,
            "dataset_root" => self.dataset_root = (!v.is_empty()).then(|| PathBuf::from(v)),
            "rotate_classes" => self.rotate_classes = parse_bool(v).context("rotate_classes")?,
            "synthetic_classes" => self.synthetic_classes = num(key, v)?,
            "synthetic_images" => self.synthetic_images = num(key, v)?,
            "synthetic_seed" => self.synthetic_seed = num(key, v)?,
            "extractor" => self.extractor = v.parse()?,
            "attention" => self.attention = v.parse()?,
            "channels" => self.channels = num(key, v)?,
            "relation_hidden" => self.relation_hidden = num(key, v)?,
            "embed_ratio" => self.embed_ratio = num(key, v)?,
            "warmup_episodes" => self.warmup_episodes = num(key, v)?,
            "eval_bn" => self.eval_bn = parse_bn(v)?,
            "seed" => self.seed = num(key, v)?,
            "way" => self.way = num(key, v)?,
            "shot" => self.shot = num(key, v)?,
            "queries" => {
                self.queries = if v == "auto" {
                    None
                } else {
                    Some(num(key, v)?)
                }
            }
            "lr" => self.lr = num(key, v)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, v)?,
            "plateau_patience" => self.plateau_patience = num(key, v)?,
            "train_episodes" => self.train_episodes = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "eval_episodes" => self.eval_episodes = num(key, v)?,
            "test_episodes" => self.test_episodes = num(key, v)?,
            "workers" => self.workers = num(key, v)?,
            _ => bail!("unknown configuration key {key:?}"),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| anyhow!("expected key=value, got {assignment:?}"))?;
        self.set(k.trim(), v.trim())
    }

    /// Apply every assignment in a configuration text.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line)
                .with_context(|| format!("{origin}:{}", i + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Settings> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut s = Settings::default();
        s.apply_text(&text, &path.display().to_string())?;
        Ok(s)
    }

    pub fn queries(&self) -> usize {
        self.queries
            .unwrap_or_else(|| default_queries(self.dataset.benchmark(), self.way, self.shot))
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.dataset {
            DatasetKind::MiniImagenet => ModelConfig::mini_imagenet,
            _ => ModelConfig::omniglot,
        };
        ModelConfig {
            channels: self.channels,
            relation_hidden: self.relation_hidden,
            embed_ratio: self.embed_ratio,
            warmup_episodes: self.warmup_episodes,
            eval_bn: self.eval_bn,
            ..base(self.extractor, self.attention)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            plateau_patience: self.plateau_patience,
            max_episodes: self.train_episodes,
            seed: self.seed,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            way: self.way,
            shot: self.shot,
            queries: self.queries(),
        }
    }

    fn value(&self, key: &str) -> String {
        match key {
            "dataset" => self.dataset.name().into(),
            "dataset_root" => self
                .dataset_root
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "rotate_classes" => self.rotate_classes.to_string(),
            "synthetic_classes" => self.synthetic_classes.to_string(),
            "synthetic_images" => self.synthetic_images.to_string(),
            "synthetic_seed" => self.synthetic_seed.to_string(),
            "extractor" => self.extractor.name().into(),
            "attention" => self.attention.name().into(),
            "channels" => self.channels.to_string(),
            "relation_hidden" => self.relation_hidden.to_string(),
            "embed_ratio" => self.embed_ratio.to_string(),
            "warmup_episodes" => self.warmup_episodes.to_string(),
            "eval_bn" => bn_name(self.eval_bn).into(),
            "seed" => self.seed.to_string(),
            "way" => self.way.to_string(),
            "shot" => self.shot.to_string(),
            "queries" => self.queries.map_or("auto".into(), |q| q.to_string()),
            "lr" => self.lr.to_string(),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "train_episodes" => self.train_episodes.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "test_episodes" => self.test_episodes.to_string(),
            "workers" => self.workers.to_string(),
            _ => unreachable!("{key} is not in KEYS"),
        }
    }
}

/// The resolved configuration, readable back by [`Settings::load`].
impl fmt::Display for Settings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.value(key));
        }
        f.write_str(&s)
    }
}
