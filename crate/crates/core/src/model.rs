//! Network assembly: feature extractor, attention block, relation head.
//!
//! Parameters live in a [`ParamStore`] of named flat buffers. A forward
//! pass first [`Model::bind`]s the store into tensors (sharing storage),
//! optionally as differentiable leaves.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{dca_forward, AttentionVariant, DcaParams};
use crate::conv::{
    batchnorm2d, conv2d, fully_connected, maxpool2x2, BatchNormState, BnMode, Conv2dParams,
};
use crate::deform::{deform_conv2d, DeformConvParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExtractorKind {
    Sfe4,
    Sfe6,
    Dfe4,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 3] = [
        ExtractorKind::Sfe4,
        ExtractorKind::Sfe6,
        ExtractorKind::Dfe4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Sfe4 => "sfe4",
            ExtractorKind::Sfe6 => "sfe6",
            ExtractorKind::Dfe4 => "dfe4",
        }
    }

    /// `(deformable, pooled)` per module, in order.
    fn modules(self) -> Vec<(bool, bool)> {
        let base = [(false, false), (false, false), (false, true), (false, true)];
        match self {
            ExtractorKind::Sfe4 => base.to_vec(),
            ExtractorKind::Dfe4 => vec![(false, false), (false, false), (true, true), (true, true)],
            ExtractorKind::Sfe6 => {
                let mut m = base.to_vec();
                m.extend([(false, false), (false, false)]);
                m
            }
        }
    }
}

impl fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExtractorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExtractorKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown extractor {s:?} (expected sfe4|sfe6|dfe4)"))
            })
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorKind,
    pub attention: AttentionVariant,
    /// Square input side; 28 for Omniglot, 84 for Mini-Imagenet.
    pub input_size: usize,
    pub in_channels: usize,
    pub channels: usize,
    pub relation_hidden: usize,
    /// `C / C'` of the attention embedding.
    pub embed_ratio: usize,
    /// Episodes before the offset predictors start training.
    pub warmup_episodes: usize,
    /// Batch-norm mode used at evaluation time.
    pub eval_bn: BnMode,
}

impl ModelConfig {
    pub fn omniglot(extractor: ExtractorKind, attention: AttentionVariant) -> Self {
        ModelConfig {
            extractor,
            attention,
            input_size: 28,
            in_channels: 1,
            channels: 64,
            relation_hidden: 128,
            embed_ratio: 4,
            warmup_episodes: 10_000,
            eval_bn: BnMode::Inference,
        }
    }

    pub fn mini_imagenet(extractor: ExtractorKind, attention: AttentionVariant) -> Self {
        ModelConfig {
            input_size: 84,
            in_channels: 3,
            ..ModelConfig::omniglot(extractor, attention)
        }
    }

    /// Side of the extractor's output map (two 2×2 pools).
    pub fn feature_size(&self) -> usize {
        self.input_size / 4
    }

    /// Side of the relation head's output map (two more pools).
    pub fn head_output_size(&self) -> usize {
        self.feature_size() / 4
    }

    pub fn embed_channels(&self) -> usize {
        self.channels / self.embed_ratio
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels == 0 || self.relation_hidden == 0 {
            return Err(Error::Config(
                "channel counts and relation_hidden must be positive".into(),
            ));
        }
        if self.embed_ratio == 0 || self.embed_channels() == 0 {
            return Err(Error::Config(format!(
                "embed_ratio {} leaves no embedding channels for {} channels",
                self.embed_ratio, self.channels
            )));
        }
        if self.feature_size() < 4 {
            return Err(Error::Config(format!(
                "input_size {} leaves a {}×{} feature map; the relation head needs at least 4×4",
                self.input_size,
                self.feature_size(),
                self.feature_size()
            )));
        }
        Ok(())
    }

    /// Stable text form of every architecture field (excludes training-only fields).
    pub fn canonical(&self) -> String {
        format!(
            "extractor={};attention={};input_size={};in_channels={};channels={};relation_hidden={};embed_ratio={}",
            self.extractor,
            self.attention,
            self.input_size,
            self.in_channels,
            self.channels,
            self.relation_hidden,
            self.embed_ratio
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    pub kind: ParamKind,
}

impl<T: Element> ParamEntry<T> {
    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Ordered collection of named parameter buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Element> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<T>,
        kind: ParamKind,
    ) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter {name:?}")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "ParamStore::insert",
                format!("{name}: shape {shape:?} vs {} values", data.len()),
            ));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            kind,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    fn require(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    /// Mutable values, copying first if a bound tensor still shares them.
    pub fn values_mut(&mut self, name: &str) -> Result<&mut Vec<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))?;
        Ok(Arc::make_mut(&mut self.entries[i].data))
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(ParamEntry::numel)
            .sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bitwise equality of names, shapes, kinds and values.
    pub fn bit_equal(&self, other: &ParamStore<T>) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name
                    && a.shape == b.shape
                    && a.kind == b.kind
                    && a.data.iter().zip(b.data.iter()).all(|(x, y)| {
                        Element::to_f64(*x).to_bits() == Element::to_f64(*y).to_bits()
                    })
            })
    }
}

/// How to bind parameters for one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PassMode {
    /// Build a graph and collect gradients.
    pub grad: bool,
    pub bn: BnMode,
    /// Offset predictors receive gradients.
    pub offsets_trainable: bool,
}

impl PassMode {
    pub fn training(offsets_trainable: bool) -> Self {
        PassMode {
            grad: true,
            bn: BnMode::Training,
            offsets_trainable,
        }
    }

    pub fn inference(bn: BnMode) -> Self {
        PassMode {
            grad: false,
            bn,
            offsets_trainable: false,
        }
    }
}

/// Relation head weights.
#[derive(Debug, Clone)]
pub struct HeadParams<T: Element> {
    pub conv1: Conv2dParams<T>,
    pub bn1: BatchNormState<T>,
    pub conv2: Conv2dParams<T>,
    pub bn2: BatchNormState<T>,
    /// `D×hidden`
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    /// `hidden×1`
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

/// Two `[conv3×3 → BN → ReLU → pool]` modules, then `FC → ReLU → FC → sigmoid`.
///
/// `combined` is `B×C×H×W` with `H, W ≥ 4`; the result has shape `[B]`.
pub fn relation_head<T: Element>(
    combined: &Tensor<T>,
    head: &mut HeadParams<T>,
) -> Result<Tensor<T>> {
    let s = combined.shape();
    if s.len() != 4 {
        return Err(Error::shape(
            "relation_head",
            format!("need B×C×H×W, got {s:?}"),
        ));
    }
    if s[2] < 4 || s[3] < 4 {
        return Err(Error::Config(format!(
            "relation_head: {}×{} input collapses to nothing after two pools",
            s[2], s[3]
        )));
    }
    let x = maxpool2x2(&batchnorm2d(&conv2d(combined, &head.conv1)?, &mut head.bn1)?.relu())?;
    let x = maxpool2x2(&batchnorm2d(&conv2d(&x, &head.conv2)?, &mut head.bn2)?.relu())?;
    let b = x.shape()[0];
    let flat = x.reshape(&[b, x.numel() / b])?;
    let hidden = fully_connected(&flat, &head.fc1_w, &head.fc1_b)?.relu();
    fully_connected(&hidden, &head.fc2_w, &head.fc2_b)?
        .sigmoid()
        .reshape(&[b])
}

/// Element-wise sum of `K ≥ 1` same-shaped sample features.
pub fn class_prototype<T: Element>(features: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = features
        .split_first()
        .ok_or_else(|| Error::Contract("class_prototype: no sample features".into()))?;
    rest.iter().try_fold(first.clone(), |acc, f| acc.add(f))
}

/// Per-class sums of class-major features `[C·K, …] → [C, …]`.
pub fn class_prototypes<T: Element>(
    features: &Tensor<T>,
    way: usize,
    shot: usize,
) -> Result<Tensor<T>> {
    let s = features.shape();
    if way == 0 || shot == 0 || s.is_empty() || s[0] != way * shot {
        return Err(Error::shape(
            "class_prototypes",
            format!("{s:?} for {way}-way {shot}-shot"),
        ));
    }
    if shot == 1 {
        return Ok(features.clone());
    }
    let mut grouped = vec![way, shot];
    grouped.extend_from_slice(&s[1..]);
    features.reshape(&grouped)?.sum_axis(1)
}

enum BlockConv<T: Element> {
    Standard(Conv2dParams<T>),
    Deformable(DeformConvParams<T>),
}

struct Block<T: Element> {
    prefix: String,
    conv: BlockConv<T>,
    bn: BatchNormState<T>,
    pool: bool,
}

/// Parameters bound as tensors for one pass.
pub struct Bound<T: Element> {
    config: ModelConfig,
    blocks: Vec<Block<T>>,
    attention: DcaParams<T>,
    head: HeadParams<T>,
    leaves: Vec<(String, Tensor<T>)>,
    mode: PassMode,
}

impl<T: Element> Bound<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> PassMode {
        self.mode
    }

    /// `B×in×S×S` images to `B×C×S/4×S/4` features.
    pub fn extract(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let s = images.shape();
        let want = [
            self.config.in_channels,
            self.config.input_size,
            self.config.input_size,
        ];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "extractor_forward",
                format!(
                    "images {s:?}, expected B×{}×{}×{}",
                    want[0], want[1], want[2]
                ),
            ));
        }
        let mut x = images.clone();
        for block in &mut self.blocks {
            x = match &block.conv {
                BlockConv::Standard(p) => conv2d(&x, p)?,
                BlockConv::Deformable(p) => deform_conv2d(&x, p)?,
            };
            x = batchnorm2d(&x, &mut block.bn)?.relu();
            if block.pool {
                x = maxpool2x2(&x)?;
            }
        }
        Ok(x)
    }

    /// Relation scores `[N, C]` for query features `[N, …]` against prototypes `[C, …]`.
    pub fn score_pairs(
        &mut self,
        prototypes: &Tensor<T>,
        queries: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let (c, n) = (prototypes.shape()[0], queries.shape()[0]);
        if prototypes.shape()[1..] != queries.shape()[1..] {
            return Err(Error::shape(
                "episode_scores",
                format!(
                    "prototypes {:?} vs queries {:?}",
                    prototypes.shape(),
                    queries.shape()
                ),
            ));
        }
        let proto_idx: Vec<usize> = (0..n * c).map(|p| p % c).collect();
        let query_idx: Vec<usize> = (0..n * c).map(|p| p / c).collect();
        let f1 = prototypes.index_select(&proto_idx)?;
        let f2 = queries.index_select(&query_idx)?;
        let combined = dca_forward(&f1, &f2, &self.attention, self.config.attention)?;
        relation_head(&combined, &mut self.head)?.reshape(&[n, c])
    }

    /// Scores `[N, C]` for class-major sample images `[C·K, …]` and query images `[N, …]`.
    ///
    /// Samples and queries pass through the extractor as one batch.
    pub fn episode_scores(
        &mut self,
        samples: &Tensor<T>,
        queries: &Tensor<T>,
        way: usize,
        shot: usize,
    ) -> Result<Tensor<T>> {
        let ns = samples.shape()[0];
        let nq = queries.shape()[0];
        if ns != way * shot || nq == 0 {
            return Err(Error::shape(
                "episode_scores",
                format!("{ns} samples, {nq} queries for {way}-way {shot}-shot"),
            ));
        }
        let features = self.extract(&Tensor::concat(&[samples, queries], 0)?)?;
        let protos = class_prototypes(&features.narrow(0, 0, ns)?, way, shot)?;
        self.score_pairs(&protos, &features.narrow(0, ns, nq)?)
    }

    /// The embedding and expansion weights of the attention block.
    pub fn attention_params(&self) -> &DcaParams<T> {
        &self.attention
    }

    /// Gradients of every differentiable leaf, in store order.
    pub fn grads(&self) -> Vec<(String, Vec<T>)> {
        self.leaves
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .filter_map(|(n, t)| t.grad().map(|g| (n.clone(), g)))
            .collect()
    }

    /// Copy updated batch-norm running statistics back into `store`.
    pub fn commit_running_stats(&self, store: &mut ParamStore<T>) -> Result<()> {
        let bns = self
            .blocks
            .iter()
            .map(|b| (format!("{}.bn", b.prefix), &b.bn))
            .chain([
                ("head.bn1".to_string(), &self.head.bn1),
                ("head.bn2".to_string(), &self.head.bn2),
            ]);
        for (prefix, bn) in bns {
            store
                .values_mut(&format!("{prefix}.running_mean"))?
                .copy_from_slice(&bn.running_mean);
            store
                .values_mut(&format!("{prefix}.running_var"))?
                .copy_from_slice(&bn.running_var);
        }
        Ok(())
    }
}

/// Configuration plus parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

struct Layout {
    name: String,
    shape: Vec<usize>,
    kind: ParamKind,
    init: Init,
}

#[derive(Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

fn layout(cfg: &ModelConfig) -> Vec<Layout> {
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, kind: ParamKind, init: Init| {
        out.push(Layout {
            name,
            shape,
            kind,
            init,
        });
    };
    let conv = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind, Init),
                prefix: &str,
                co: usize,
                ci: usize,
                k: usize,
                bias: bool,
                init: Init| {
        push(
            format!("{prefix}.weight"),
            vec![co, ci, k, k],
            ParamKind::Trainable,
            init,
        );
        if bias {
            push(
                format!("{prefix}.bias"),
                vec![co],
                ParamKind::Trainable,
                Init::Zeros,
            );
        }
    };
    let bn = |push: &mut dyn FnMut(String, Vec<usize>, ParamKind, Init), prefix: &str, c: usize| {
        push(
            format!("{prefix}.gamma"),
            vec![c],
            ParamKind::Trainable,
            Init::Ones,
        );
        push(
            format!("{prefix}.beta"),
            vec![c],
            ParamKind::Trainable,
            Init::Zeros,
        );
        push(
            format!("{prefix}.running_mean"),
            vec![c],
            ParamKind::Buffer,
            Init::Zeros,
        );
        push(
            format!("{prefix}.running_var"),
            vec![c],
            ParamKind::Buffer,
            Init::Ones,
        );
    };

    let c = cfg.channels;
    for (i, (deformable, _)) in cfg.extractor.modules().into_iter().enumerate() {
        let ci = if i == 0 { cfg.in_channels } else { c };
        let prefix = format!("extractor.{i}");
        conv(
            &mut push,
            &format!("{prefix}.conv"),
            c,
            ci,
            3,
            true,
            Init::He { fan_in: ci * 9 },
        );
        if deformable {
            conv(
                &mut push,
                &format!("{prefix}.offset"),
                18,
                ci,
                3,
                true,
                Init::Zeros,
            );
        }
        bn(&mut push, &format!("{prefix}.bn"), c);
    }

    let cp = cfg.embed_channels();
    match cfg.attention {
        AttentionVariant::None => {}
        AttentionVariant::Baseline => {
            conv(
                &mut push,
                "attention.baseline",
                c,
                c,
                1,
                false,
                Init::He { fan_in: c },
            );
        }
        _ => {
            conv(
                &mut push,
                "attention.embed",
                cp,
                c,
                1,
                false,
                Init::He { fan_in: c },
            );
            conv(
                &mut push,
                "attention.expand",
                c,
                cp,
                1,
                false,
                Init::He { fan_in: cp },
            );
        }
    }

    let hc = c * cfg.attention.output_factor();
    conv(
        &mut push,
        "head.conv1",
        c,
        hc,
        3,
        true,
        Init::He { fan_in: hc * 9 },
    );
    bn(&mut push, "head.bn1", c);
    conv(
        &mut push,
        "head.conv2",
        c,
        c,
        3,
        true,
        Init::He { fan_in: c * 9 },
    );
    bn(&mut push, "head.bn2", c);
    let d = c * cfg.head_output_size() * cfg.head_output_size();
    let h = cfg.relation_hidden;
    push(
        "head.fc1.weight".into(),
        vec![d, h],
        ParamKind::Trainable,
        Init::He { fan_in: d },
    );
    push(
        "head.fc1.bias".into(),
        vec![h],
        ParamKind::Trainable,
        Init::Zeros,
    );
    push(
        "head.fc2.weight".into(),
        vec![h, 1],
        ParamKind::Trainable,
        Init::He { fan_in: h },
    );
    push(
        "head.fc2.bias".into(),
        vec![1],
        ParamKind::Trainable,
        Init::Zeros,
    );
    out
}

impl<T: Element> Model<T> {
    /// He-normal weights, zero biases, unit BN scale, zero offset predictors.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for l in layout(&config) {
            let n = l.shape.iter().product();
            let data = match l.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .map_err(|e| Error::Numeric(format!("init: {e}")))?;
                    (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
                }
            };
            params.insert(&l.name, &l.shape, data, l.kind)?;
        }
        Ok(Model { config, params })
    }

    /// Wrap an existing store, checking it has exactly the expected layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != params.len() {
            return Err(Error::Contract(format!(
                "parameter store has {} entries, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (l, e) in expected.iter().zip(params.entries()) {
            if l.name != e.name || l.shape != e.shape || l.kind != e.kind {
                return Err(Error::shape(
                    "Model::from_params",
                    format!(
                        "expected {} {:?}, found {} {:?}",
                        l.name, l.shape, e.name, e.shape
                    ),
                ));
            }
        }
        Ok(Model { config, params })
    }

    /// Bind the store into tensors sharing its storage.
    pub fn bind(&self, mode: PassMode) -> Result<Bound<T>> {
        let cfg = &self.config;
        let mut leaves = Vec::new();
        let mut tensor = |name: &str, grad: bool| -> Result<Tensor<T>> {
            let e = self.params.require(name)?;
            let t = Tensor::from_shared(e.data.clone(), &e.shape, grad)?;
            leaves.push((name.to_string(), t.clone()));
            Ok(t)
        };
        let g = mode.grad;
        let conv = |tensor: &mut dyn FnMut(&str, bool) -> Result<Tensor<T>>,
                    prefix: &str,
                    bias: bool,
                    pad: usize,
                    grad: bool|
         -> Result<Conv2dParams<T>> {
            let w = tensor(&format!("{prefix}.weight"), grad)?;
            let b = if bias {
                Some(tensor(&format!("{prefix}.bias"), grad)?)
            } else {
                None
            };
            Ok(Conv2dParams::new(w, b, 1, pad))
        };
        let bn = |tensor: &mut dyn FnMut(&str, bool) -> Result<Tensor<T>>,
                  prefix: &str|
         -> Result<BatchNormState<T>> {
            let gamma = tensor(&format!("{prefix}.gamma"), g)?;
            let beta = tensor(&format!("{prefix}.beta"), g)?;
            let mut s = BatchNormState::new(gamma.numel(), mode.bn)?;
            s.gamma = gamma;
            s.beta = beta;
            s.running_mean = self
                .params
                .require(&format!("{prefix}.running_mean"))?
                .data
                .to_vec();
            s.running_var = self
                .params
                .require(&format!("{prefix}.running_var"))?
                .data
                .to_vec();
            Ok(s)
        };

        let mut blocks = Vec::new();
        for (i, (deformable, pool)) in cfg.extractor.modules().into_iter().enumerate() {
            let prefix = format!("extractor.{i}");
            let main = conv(&mut tensor, &format!("{prefix}.conv"), true, 1, g)?;
            let conv_kind = if deformable {
                let trainable = g && mode.offsets_trainable;
                let offset = conv(&mut tensor, &format!("{prefix}.offset"), true, 1, trainable)?;
                BlockConv::Deformable(DeformConvParams {
                    main,
                    offset,
                    offset_trainable: trainable,
                })
            } else {
                BlockConv::Standard(main)
            };
            let bn_state = bn(&mut tensor, &format!("{prefix}.bn"))?;
            blocks.push(Block {
                prefix,
                conv: conv_kind,
                bn: bn_state,
                pool,
            });
        }

        let placeholder = || {
            Conv2dParams::new(
                Tensor::zeros(&[1, 1, 1, 1]).expect("static shape"),
                None,
                1,
                0,
            )
        };
        let attention = match cfg.attention {
            AttentionVariant::None => DcaParams {
                embed: placeholder(),
                expand: placeholder(),
                baseline: None,
            },
            AttentionVariant::Baseline => DcaParams {
                embed: placeholder(),
                expand: placeholder(),
                baseline: Some(conv(&mut tensor, "attention.baseline", false, 0, g)?),
            },
            _ => DcaParams {
                embed: conv(&mut tensor, "attention.embed", false, 0, g)?,
                expand: conv(&mut tensor, "attention.expand", false, 0, g)?,
                baseline: None,
            },
        };

        let conv1 = conv(&mut tensor, "head.conv1", true, 1, g)?;
        let bn1 = bn(&mut tensor, "head.bn1")?;
        let conv2 = conv(&mut tensor, "head.conv2", true, 1, g)?;
        let bn2 = bn(&mut tensor, "head.bn2")?;
        let head = HeadParams {
            conv1,
            bn1,
            conv2,
            bn2,
            fc1_w: tensor("head.fc1.weight", g)?,
            fc1_b: tensor("head.fc1.bias", g)?,
            fc2_w: tensor("head.fc2.weight", g)?,
            fc2_b: tensor("head.fc2.bias", g)?,
        };
        Ok(Bound {
            config: cfg.clone(),
            blocks,
            attention,
            head,
            leaves,
            mode,
        })
    }

    /// Inference-mode scores `[N, C]` (no graph, running BN statistics per `eval_bn`).
    pub fn predict(
        &self,
        samples: &Tensor<T>,
        queries: &Tensor<T>,
        way: usize,
        shot: usize,
    ) -> Result<Tensor<T>> {
        self.bind(PassMode::inference(self.config.eval_bn))?
            .episode_scores(samples, queries, way, shot)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::from_store(&self.config, &self.params)
    }
}

/// Reference trainable-parameter totals at 84×84 RGB input with no attention.
pub const REFERENCE_TOTALS: [(ExtractorKind, usize, f64); 2] = [
    (ExtractorKind::Sfe4, 424_000, 0.02),
    (ExtractorKind::Dfe4, 445_000, 0.05),
];

/// Layer-by-layer parameter listing.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub config: ModelConfig,
    /// `(name, shape, count, kind)`
    pub entries: Vec<(String, Vec<usize>, usize, ParamKind)>,
    pub trainable: usize,
    pub buffers: usize,
}

impl Manifest {
    pub fn from_store<T: Element>(config: &ModelConfig, store: &ParamStore<T>) -> Self {
        let entries: Vec<_> = store
            .entries()
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), e.numel(), e.kind))
            .collect();
        let sum = |k: ParamKind| entries.iter().filter(|e| e.3 == k).map(|e| e.2).sum();
        Manifest {
            config: config.clone(),
            trainable: sum(ParamKind::Trainable),
            buffers: sum(ParamKind::Buffer),
            entries,
        }
    }

    /// Reference total and tolerance, when this configuration has one.
    pub fn reference(&self) -> Option<(usize, f64)> {
        let c = &self.config;
        let standard = c.input_size == 84
            && c.in_channels == 3
            && c.channels == 64
            && c.attention == AttentionVariant::None;
        if !standard {
            return None;
        }
        REFERENCE_TOTALS
            .iter()
            .find(|(k, _, _)| *k == c.extractor)
            .map(|&(_, total, tol)| (total, tol))
    }

    /// Signed relative deviation from the reference total.
    pub fn deviation(&self) -> Option<f64> {
        self.reference()
            .map(|(r, _)| (self.trainable as f64 - r as f64) / r as f64)
    }

    /// Totals per top-level group (`extractor`, `attention`, `head`).
    pub fn group_totals(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (name, _, n, kind) in &self.entries {
            if *kind != ParamKind::Trainable {
                continue;
            }
            let group = name.split('.').next().unwrap_or(name).to_string();
            match out.iter_mut().find(|(g, _)| *g == group) {
                Some((_, t)) => *t += n,
                None => out.push((group, *n)),
            }
        }
        out
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("# architecture: {}\n", self.config.canonical()));
        s.push_str("# name\tshape\tcount\tkind\n");
        for (name, shape, n, kind) in &self.entries {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let kind = match kind {
                ParamKind::Trainable => "trainable",
                ParamKind::Buffer => "buffer",
            };
            s.push_str(&format!("{name}\t{}\t{n}\t{kind}\n", dims.join("x")));
        }
        for (g, n) in self.group_totals() {
            s.push_str(&format!("# {g} trainable: {n}\n"));
        }
        s.push_str(&format!("# trainable total: {}\n", self.trainable));
        s.push_str(&format!(
            "# buffer total (not trainable): {}\n",
            self.buffers
        ));
        if let (Some((r, tol)), Some(dev)) = (self.reference(), self.deviation()) {
            s.push_str(&format!(
                "# reference total: {r} (tolerance ±{:.0}%), deviation {:+.2}%\n",
                tol * 100.0,
                dev * 100.0
            ));
            s.push_str(&format!(
                "# relation head hidden width {} sets the head's fully connected size {}x{}; conv layers carry biases; batch-norm scale and shift are counted\n",
                self.config.relation_hidden,
                self.config.channels * self.config.head_output_size().pow(2),
                self.config.relation_hidden
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(extractor: ExtractorKind, attention: AttentionVariant) -> ModelConfig {
        ModelConfig {
            input_size: 16,
            channels: 8,
            relation_hidden: 4,
            ..ModelConfig::omniglot(extractor, attention)
        }
    }

    fn images(n: usize, side: usize, phase: f32) -> Tensor<f32> {
        let data = (0..n * side * side)
            .map(|i| ((i as f32 * 0.37 + phase).sin() + 1.0) * 0.5)
            .collect();
        Tensor::new(data, &[n, 1, side, side]).unwrap()
    }

    #[test]
    fn extractor_output_shapes() {
        let m = Model::<f32>::new(
            ModelConfig::omniglot(ExtractorKind::Sfe4, AttentionVariant::None),
            1,
        )
        .unwrap();
        let out = m
            .bind(PassMode::inference(BnMode::Inference))
            .unwrap()
            .extract(&images(2, 28, 0.0))
            .unwrap();
        assert_eq!(out.shape(), &[2, 64, 7, 7]);

        let cfg = ModelConfig {
            channels: 8,
            ..ModelConfig::mini_imagenet(ExtractorKind::Sfe6, AttentionVariant::None)
        };
        let m = Model::<f32>::new(cfg, 1).unwrap();
        let img = Tensor::new(vec![0.5; 3 * 84 * 84], &[1, 3, 84, 84]).unwrap();
        let out = m
            .bind(PassMode::inference(BnMode::Inference))
            .unwrap()
            .extract(&img)
            .unwrap();
        assert_eq!(out.shape(), &[1, 8, 21, 21]);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let m = Model::<f32>::new(tiny(ExtractorKind::Sfe4, AttentionVariant::None), 1).unwrap();
        let mut b = m.bind(PassMode::inference(BnMode::Inference)).unwrap();
        assert!(matches!(
            b.extract(&images(1, 20, 0.0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_offset_dfe_matches_sfe() {
        let sfe = Model::<f32>::new(tiny(ExtractorKind::Sfe4, AttentionVariant::None), 3).unwrap();
        let dfe = Model::<f32>::new(tiny(ExtractorKind::Dfe4, AttentionVariant::None), 3).unwrap();
        let mut store = dfe.params.clone();
        for e in sfe.params.entries() {
            store.values_mut(&e.name).unwrap().copy_from_slice(&e.data);
        }
        let dfe = Model::from_params(dfe.config.clone(), store).unwrap();
        let x = images(3, 16, 0.4);
        let a = sfe
            .bind(PassMode::training(false))
            .unwrap()
            .extract(&x)
            .unwrap();
        let b = dfe
            .bind(PassMode::training(false))
            .unwrap()
            .extract(&x)
            .unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn head_reduces_seven_to_one() {
        let m = Model::<f32>::new(
            ModelConfig::omniglot(ExtractorKind::Sfe4, AttentionVariant::Dca),
            5,
        )
        .unwrap();
        let b = m.bind(PassMode::inference(BnMode::Inference)).unwrap();
        let mut head = b.head.clone();
        let x = Tensor::new(
            (0..384 * 49).map(|i| (i as f32 * 0.1).sin()).collect(),
            &[1, 384, 7, 7],
        )
        .unwrap();
        let s = relation_head(&x, &mut head).unwrap();
        assert_eq!(s.shape(), &[1]);
        let v = s.data()[0];
        assert!(v > 0.0 && v < 1.0);
        let small = Tensor::new(vec![0.0; 384 * 9], &[1, 384, 3, 3]).unwrap();
        assert!(matches!(
            relation_head(&small, &mut head),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn prototypes_sum_over_shots() {
        let f = Tensor::new(vec![1.0f32, 2.0, 3.0, 4.0], &[1, 4]).unwrap();
        assert_eq!(class_prototype(&[f.clone()]).unwrap().to_vec(), f.to_vec());
        let five = class_prototype(&vec![f.clone(); 5]).unwrap();
        assert_eq!(five.to_vec(), vec![5.0, 10.0, 15.0, 20.0]);
        assert!(class_prototype::<f32>(&[]).is_err());

        let batch = Tensor::new((0..12).map(|i| i as f32).collect(), &[4, 3]).unwrap();
        let p = class_prototypes(&batch, 2, 2).unwrap();
        assert_eq!(p.to_vec(), vec![3.0, 5.0, 7.0, 15.0, 17.0, 19.0]);
    }

    #[test]
    fn episode_scores_shape_and_range() {
        for v in AttentionVariant::ALL {
            for e in ExtractorKind::ALL {
                let m = Model::<f32>::new(tiny(e, v), 9).unwrap();
                let s = m
                    .predict(&images(6, 16, 0.0), &images(4, 16, 1.0), 3, 2)
                    .unwrap();
                assert_eq!(s.shape(), &[4, 3], "{e} {v}");
                assert!(s.data().iter().all(|&x| x > 0.0 && x < 1.0));
            }
        }
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let m = Model::<f32>::new(tiny(ExtractorKind::Dfe4, AttentionVariant::Dca), 2).unwrap();
        let a = m
            .predict(&images(2, 16, 0.0), &images(3, 16, 0.5), 2, 1)
            .unwrap();
        let b = m
            .predict(&images(2, 16, 0.0), &images(3, 16, 0.5), 2, 1)
            .unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn gradients_reach_every_trainable_parameter() {
        let m = Model::<f64>::new(
            ModelConfig {
                input_size: 16,
                channels: 4,
                relation_hidden: 3,
                ..ModelConfig::omniglot(ExtractorKind::Dfe4, AttentionVariant::Dca)
            },
            4,
        )
        .unwrap();
        let mut b = m.bind(PassMode::training(true)).unwrap();
        let img = |n: usize, p: f64| {
            Tensor::new(
                (0..n * 256)
                    .map(|i| ((i as f64 * 0.21 + p).sin() + 1.0) * 0.5)
                    .collect(),
                &[n, 1, 16, 16],
            )
            .unwrap()
        };
        let s = b.episode_scores(&img(2, 0.0), &img(4, 2.0), 2, 1).unwrap();
        s.sum().backward().unwrap();
        let grads = b.grads();
        assert_eq!(
            grads.len(),
            m.params
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Trainable)
                .count()
        );
        // Offset predictors start at zero, so only their bias sees a guaranteed
        // nonzero gradient at initialization; everything else must move.
        for (name, g) in grads {
            if name.contains("offset.weight") {
                continue;
            }
            assert!(
                g.iter().any(|v| *v != 0.0),
                "{name} has an all-zero gradient"
            );
        }
    }

    #[test]
    fn frozen_offsets_get_no_gradient() {
        let m = Model::<f32>::new(tiny(ExtractorKind::Dfe4, AttentionVariant::None), 4).unwrap();
        let mut b = m.bind(PassMode::training(false)).unwrap();
        b.episode_scores(&images(2, 16, 0.0), &images(2, 16, 1.0), 2, 1)
            .unwrap()
            .sum()
            .backward()
            .unwrap();
        assert!(b.grads().iter().all(|(n, _)| !n.contains("offset")));
    }

    #[test]
    fn training_pass_updates_running_stats() {
        let m = Model::<f32>::new(tiny(ExtractorKind::Sfe4, AttentionVariant::None), 4).unwrap();
        let mut store = m.params.clone();
        let mut b = m.bind(PassMode::training(false)).unwrap();
        b.episode_scores(&images(2, 16, 0.0), &images(2, 16, 1.0), 2, 1)
            .unwrap();
        b.commit_running_stats(&mut store).unwrap();
        let before = m.params.get("extractor.0.bn.running_mean").unwrap();
        let after = store.get("extractor.0.bn.running_mean").unwrap();
        assert_ne!(before.data, after.data);
    }

    #[test]
    fn parameter_totals_match_references() {
        let sfe = Model::<f32>::new(
            ModelConfig::mini_imagenet(ExtractorKind::Sfe4, AttentionVariant::None),
            0,
        )
        .unwrap();
        let dfe = Model::<f32>::new(
            ModelConfig::mini_imagenet(ExtractorKind::Dfe4, AttentionVariant::None),
            0,
        )
        .unwrap();
        let (ms, md) = (sfe.manifest(), dfe.manifest());
        assert_eq!(ms.trainable, 429_121);
        assert_eq!(md.trainable, 449_893);
        assert!(ms.deviation().unwrap().abs() <= 0.02);
        assert!(md.deviation().unwrap().abs() <= 0.05);
        assert!(ms.render().contains("# trainable total: 429121"));
    }

    #[test]
    fn from_params_rejects_foreign_layout() {
        let a = Model::<f32>::new(tiny(ExtractorKind::Sfe4, AttentionVariant::None), 0).unwrap();
        assert!(Model::from_params(
            tiny(ExtractorKind::Dfe4, AttentionVariant::None),
            a.params.clone()
        )
        .is_err());
        assert!(
            Model::from_params(tiny(ExtractorKind::Sfe4, AttentionVariant::Dca), a.params).is_err()
        );
    }

    #[test]
    fn config_names_parse() {
        for e in ExtractorKind::ALL {
            assert_eq!(e.name().parse::<ExtractorKind>().unwrap(), e);
        }
        assert!("sfe5".parse::<ExtractorKind>().is_err());
        let bad = ModelConfig {
            input_size: 12,
            ..ModelConfig::omniglot(ExtractorKind::Sfe4, AttentionVariant::None)
        };
        assert!(bad.validate().is_err());
    }
}
