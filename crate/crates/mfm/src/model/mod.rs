//! Encoder–decoder backbone with additive token/position/whole-word/category
//! embeddings, bottleneck adapters at configurable sites, and a two-layer
//! mapping network that turns one image feature vector into `k` token
//! embeddings.
//!
//! The tuning mode decides which adapter sites exist and which tensors are
//! trainable; it never changes the forward computation at fixed parameter
//! values, because absent sites are exactly identity and all shared tensors
//! are initialized from per-name random streams (the same name always gets
//! the same values for a given seed, whatever the mode).

mod checkpoint;
mod forward;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use forward::{
    build_loss_graph, decoder_logits, embed_sequence, encoder_states, forward_logits, LossGraph,
};
pub use ops::{adapter_apply, attention, map_image_feature};

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::fingerprint64;
use crate::error::{Error, Result};

/// Which parameters train, and which adapter sites exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TuningMode {
    /// Adapters after every encoder/decoder self-attention and feed-forward
    /// sublayer; decoder cross-attention has no site.
    SelfAttnAdapters,
    /// Adapters additionally after decoder cross-attention.
    AllAttnAdapters,
    /// No adapter sites; every tensor trains.
    Full,
}

impl TuningMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            TuningMode::SelfAttnAdapters => "self-attn",
            TuningMode::AllAttnAdapters => "all-attn",
            TuningMode::Full => "full",
        }
    }

    pub fn parse(s: &str) -> Option<TuningMode> {
        match s {
            "self-attn" => Some(TuningMode::SelfAttnAdapters),
            "all-attn" => Some(TuningMode::AllAttnAdapters),
            "full" => Some(TuningMode::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Layers per stack (encoder and decoder each have `l` layers).
    pub l: usize,
    /// Model width.
    pub d: usize,
    /// Attention heads.
    pub h: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    /// Vocabulary size.
    pub v: usize,
    /// Raw image feature width.
    pub d_v: usize,
    /// Image tokens per item field; 0 disables the mapping network.
    pub k: usize,
    /// Adapter reduction rate (bottleneck width = d / r).
    pub r: usize,
    pub max_len: usize,
    pub max_whole_words: usize,
    pub tuning_mode: TuningMode,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            l: 2,
            d: 64,
            h: 4,
            d_ff: 128,
            v: 512,
            d_v: 16,
            k: 2,
            r: 8,
            max_len: 256,
            max_whole_words: 256,
            tuning_mode: TuningMode::SelfAttnAdapters,
        }
    }

    /// Reference shape used for parameter accounting at full scale; far too
    /// large to materialize or train here.
    pub fn accounting_reference() -> Self {
        ModelConfig {
            l: 6,
            d: 512,
            h: 8,
            d_ff: 2048,
            v: 32100,
            d_v: 512,
            k: 2,
            r: 8,
            max_len: 1024,
            max_whole_words: 1024,
            tuning_mode: TuningMode::SelfAttnAdapters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l", self.l),
            ("d", self.d),
            ("h", self.h),
            ("d_ff", self.d_ff),
            ("v", self.v),
            ("d_v", self.d_v),
            ("r", self.r),
            ("max_len", self.max_len),
            ("max_whole_words", self.max_whole_words),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.v < 4 {
            return Err(Error::Config(format!(
                "vocabulary size {} leaves no room beyond the reserved ids",
                self.v
            )));
        }
        if self.d % self.h != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.d, self.h
            )));
        }
        if self.d % self.r != 0 {
            return Err(Error::Config(format!(
                "reduction rate {} does not divide width {}",
                self.r, self.d
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d / self.h
    }

    pub fn bottleneck(&self) -> usize {
        self.d / self.r
    }
}

/// Functional role of a tensor; decides trainability per tuning mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Backbone,
    Adapter,
    MapNet,
    CategoryEmbedding,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitRule {
    Zeros,
    Ones,
    /// Standard normal scaled by the factor.
    NormalScaled(f64),
    /// Normal with variance 2 / (fan_in + fan_out).
    GlorotNormal,
}

/// Name, shape, and role of one tensor in a given configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: TensorKind,
    init: InitRule,
}

impl TensorSpec {
    pub fn count(&self) -> u64 {
        self.rows as u64 * self.cols as u64
    }

    pub fn trainable(&self, mode: TuningMode) -> bool {
        mode == TuningMode::Full || self.kind != TensorKind::Backbone
    }
}

fn spec(name: String, rows: usize, cols: usize, kind: TensorKind, init: InitRule) -> TensorSpec {
    TensorSpec {
        name,
        rows,
        cols,
        kind,
        init,
    }
}

fn push_adapter(out: &mut Vec<TensorSpec>, site: &str, d: usize, b: usize) {
    use InitRule::*;
    use TensorKind::Adapter;
    out.push(spec(format!("{site}.down.w"), d, b, Adapter, GlorotNormal));
    out.push(spec(format!("{site}.down.b"), 1, b, Adapter, Zeros));
    out.push(spec(format!("{site}.up.w"), b, d, Adapter, Zeros));
    out.push(spec(format!("{site}.up.b"), 1, d, Adapter, Zeros));
}

fn push_attention(out: &mut Vec<TensorSpec>, prefix: &str, d: usize) {
    use InitRule::GlorotNormal;
    use TensorKind::Backbone;
    for w in ["wq", "wk", "wv", "wo"] {
        out.push(spec(format!("{prefix}.{w}"), d, d, Backbone, GlorotNormal));
    }
}

fn push_norm(out: &mut Vec<TensorSpec>, prefix: &str, d: usize) {
    use InitRule::*;
    use TensorKind::Backbone;
    out.push(spec(format!("{prefix}.gamma"), 1, d, Backbone, Ones));
    out.push(spec(format!("{prefix}.beta"), 1, d, Backbone, Zeros));
}

fn push_ffn(out: &mut Vec<TensorSpec>, prefix: &str, d: usize, d_ff: usize) {
    use InitRule::*;
    use TensorKind::Backbone;
    out.push(spec(format!("{prefix}.w1"), d, d_ff, Backbone, GlorotNormal));
    out.push(spec(format!("{prefix}.b1"), 1, d_ff, Backbone, Zeros));
    out.push(spec(format!("{prefix}.w2"), d_ff, d, Backbone, GlorotNormal));
    out.push(spec(format!("{prefix}.b2"), 1, d, Backbone, Zeros));
}

/// Every tensor the configuration implies, in a stable order. Adapter sites
/// appear only in adapter modes; the mapping network only when `k > 0`.
pub fn tensor_catalog(cfg: &ModelConfig) -> Vec<TensorSpec> {
    use InitRule::*;
    use TensorKind::*;
    let mut out = Vec::new();
    let adapters = cfg.tuning_mode != TuningMode::Full;
    let cross_adapters = cfg.tuning_mode == TuningMode::AllAttnAdapters;
    let b = cfg.bottleneck();

    out.push(spec(
        "token_embedding".into(),
        cfg.v,
        cfg.d,
        Backbone,
        NormalScaled(0.1),
    ));
    out.push(spec(
        "position_embedding".into(),
        cfg.max_len,
        cfg.d,
        Backbone,
        NormalScaled(0.1),
    ));
    out.push(spec(
        "whole_word_embedding".into(),
        cfg.max_whole_words,
        cfg.d,
        Backbone,
        NormalScaled(0.1),
    ));
    out.push(spec(
        "category_embedding".into(),
        2,
        cfg.d,
        CategoryEmbedding,
        NormalScaled(0.1),
    ));

    for layer in 0..cfg.l {
        let p = format!("enc.{layer}");
        push_attention(&mut out, &format!("{p}.attn"), cfg.d);
        if adapters {
            push_adapter(&mut out, &format!("{p}.attn_adapter"), cfg.d, b);
        }
        push_norm(&mut out, &format!("{p}.attn_norm"), cfg.d);
        push_ffn(&mut out, &format!("{p}.ffn"), cfg.d, cfg.d_ff);
        if adapters {
            push_adapter(&mut out, &format!("{p}.ffn_adapter"), cfg.d, b);
        }
        push_norm(&mut out, &format!("{p}.ffn_norm"), cfg.d);
    }
    for layer in 0..cfg.l {
        let p = format!("dec.{layer}");
        push_attention(&mut out, &format!("{p}.self_attn"), cfg.d);
        if adapters {
            push_adapter(&mut out, &format!("{p}.self_attn_adapter"), cfg.d, b);
        }
        push_norm(&mut out, &format!("{p}.self_attn_norm"), cfg.d);
        push_attention(&mut out, &format!("{p}.cross_attn"), cfg.d);
        if cross_adapters {
            push_adapter(&mut out, &format!("{p}.cross_attn_adapter"), cfg.d, b);
        }
        push_norm(&mut out, &format!("{p}.cross_attn_norm"), cfg.d);
        push_ffn(&mut out, &format!("{p}.ffn"), cfg.d, cfg.d_ff);
        if adapters {
            push_adapter(&mut out, &format!("{p}.ffn_adapter"), cfg.d, b);
        }
        push_norm(&mut out, &format!("{p}.ffn_norm"), cfg.d);
    }

    if cfg.k > 0 {
        out.push(spec("mapnet.w1".into(), cfg.d_v, cfg.d, MapNet, GlorotNormal));
        out.push(spec("mapnet.b1".into(), 1, cfg.d, MapNet, Zeros));
        out.push(spec(
            "mapnet.w2".into(),
            cfg.d,
            cfg.k * cfg.d,
            MapNet,
            GlorotNormal,
        ));
        out.push(spec("mapnet.b2".into(), 1, cfg.k * cfg.d, MapNet, Zeros));
    }
    out
}

/// One named tensor with its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Array2<f64>,
    pub frozen: bool,
}

/// All model parameters, keyed by name in a stable (sorted) order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Tensor>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn materialize(spec: &TensorSpec, seed: u64) -> Array2<f64> {
    match spec.init {
        InitRule::Zeros => Array2::zeros((spec.rows, spec.cols)),
        InitRule::Ones => Array2::ones((spec.rows, spec.cols)),
        InitRule::NormalScaled(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fingerprint64(spec.name.as_bytes()));
            Array2::from_shape_fn((spec.rows, spec.cols), |_| s * normal(&mut rng))
        }
        InitRule::GlorotNormal => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fingerprint64(spec.name.as_bytes()));
            let s = (2.0 / (spec.rows + spec.cols) as f64).sqrt();
            Array2::from_shape_fn((spec.rows, spec.cols), |_| s * normal(&mut rng))
        }
    }
}

impl ParameterStore {
    /// Initialize all tensors for the configuration. Each tensor's values
    /// come from a stream seeded by `(seed, name)`, so shared tensors are
    /// identical across tuning modes for a given seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for spec in tensor_catalog(config) {
            let data = materialize(&spec, seed);
            tensors.insert(
                spec.name.clone(),
                Tensor {
                    data,
                    frozen: !spec.trainable(config.tuning_mode),
                },
            );
        }
        Ok(ParameterStore {
            config: config.clone(),
            tensors,
        })
    }

    /// A store with no tensors yet; used by the checkpoint loader, which
    /// inserts exactly the validated catalog.
    pub(crate) fn empty(config: ModelConfig) -> Self {
        ParameterStore {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub(crate) fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| !t.frozen)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Replace a tensor's values; the shape must match.
    pub fn set_data(&mut self, name: &str, data: Array2<f64>) -> Result<()> {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor '{name}'")))?;
        if t.data.dim() != data.dim() {
            return Err(Error::Dimension {
                what: format!("tensor '{name}'"),
                expected: format!("{:?}", t.data.dim()),
                got: format!("{:?}", data.dim()),
            });
        }
        t.data = data;
        Ok(())
    }

    /// In-place update of a trainable tensor.
    pub fn update<F>(&mut self, name: &str, f: F) -> Result<()>
    where
        F: FnOnce(&mut Array2<f64>),
    {
        let t = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown tensor '{name}'")))?;
        if t.frozen {
            return Err(Error::Config(format!(
                "tensor '{name}' is frozen and cannot be updated"
            )));
        }
        f(&mut t.data);
        Ok(())
    }
}

/// Exact trainable/total accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub total: u64,
    pub trainable: u64,
}

impl ParamCounts {
    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64 * 100.0
        }
    }
}

/// Accounting from shapes alone — works for configurations too large to
/// materialize.
pub fn count_parameters_catalog(cfg: &ModelConfig) -> ParamCounts {
    let mut counts = ParamCounts {
        total: 0,
        trainable: 0,
    };
    for spec in tensor_catalog(cfg) {
        counts.total += spec.count();
        if spec.trainable(cfg.tuning_mode) {
            counts.trainable += spec.count();
        }
    }
    counts
}

/// Accounting from a live store's freeze flags.
pub fn count_parameters(store: &ParameterStore) -> ParamCounts {
    let mut counts = ParamCounts {
        total: 0,
        trainable: 0,
    };
    for (_, t) in store.iter() {
        let n = t.data.len() as u64;
        counts.total += n;
        if !t.frozen {
            counts.trainable += n;
        }
    }
    counts
}
