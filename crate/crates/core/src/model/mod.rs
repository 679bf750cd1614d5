//! Encoder-decoder and decoder-only transformers.
//!
//! Blocks are pre-layer-norm with sinusoidal positions. Parameters live in a
//! single [`ParamStore`] under stable dotted names (`encoder.0.self.q.w`, ...),
//! which is what layer pruning and checkpoints key on.

mod forward;
pub mod infer;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use forward::{attention_relations, ForwardTrace, LayerTrace, RelationKind, Relations};

use crate::error::{Error, Result};
use crate::tensor::{load_checkpoint, save_checkpoint, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub tie_embeddings: bool,
}

impl ModelConfig {
    pub fn encoder_decoder(layers: (usize, usize), d_model: usize, heads: usize, vocab_size: usize, max_len: usize) -> Self {
        Self {
            arch: Arch::EncoderDecoder,
            encoder_layers: layers.0,
            decoder_layers: layers.1,
            d_model,
            heads,
            d_ff: 2 * d_model,
            vocab_size,
            max_len,
            dropout: 0.1,
            tie_embeddings: true,
        }
    }

    pub fn decoder_only(layers: usize, d_model: usize, heads: usize, vocab_size: usize, max_len: usize) -> Self {
        Self {
            arch: Arch::DecoderOnly,
            encoder_layers: 0,
            ..Self::encoder_decoder((0, layers), d_model, heads, vocab_size, max_len)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by heads {}", self.d_model, self.heads)));
        }
        match self.arch {
            Arch::DecoderOnly if self.encoder_layers != 0 => {
                return Err(Error::Config("decoder-only models have no encoder layers".into()))
            }
            Arch::EncoderDecoder if self.encoder_layers == 0 => {
                return Err(Error::Config("encoder-decoder needs at least one encoder layer".into()))
            }
            _ => {}
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("at least one decoder layer is required".into()));
        }
        if self.vocab_size <= crate::vocab::SPECIALS.len() || self.max_len == 0 || self.d_ff == 0 {
            return Err(Error::Config("vocab_size, max_len and d_ff must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    Decoder,
}

/// Transformer weights plus architecture.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamStore,
    positions: Vec<f64>,
}

fn sinusoidal(max_len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: Vec<usize>, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| dist.sample(&mut self.rng)).collect()).expect("finite init")
    }
}

fn add_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::new(vec![d], vec![1.0; d]).expect("ones"));
    store.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
}

fn add_attention(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize, out_std: f64) {
    for proj in ["q", "k", "v"] {
        store.insert(format!("{prefix}.{proj}.w"), init.normal(vec![d, d], 1.0 / (d as f64).sqrt()));
        store.insert(format!("{prefix}.{proj}.b"), Tensor::zeros(vec![d]));
    }
    store.insert(format!("{prefix}.o.w"), init.normal(vec![d, d], out_std));
    store.insert(format!("{prefix}.o.b"), Tensor::zeros(vec![d]));
}

fn add_ffn(store: &mut ParamStore, init: &mut Init, prefix: &str, d: usize, d_ff: usize, out_std: f64) {
    store.insert(format!("{prefix}.w1"), init.normal(vec![d, d_ff], 1.0 / (d as f64).sqrt()));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(vec![d_ff]));
    store.insert(format!("{prefix}.w2"), init.normal(vec![d_ff, d], out_std));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d]));
}

impl Seq2SeqModel {
    /// Randomly initialized model.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut init = Init { rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut store = ParamStore::new();
        let depth = (config.encoder_layers + config.decoder_layers).max(1) as f64;
        let out_attn = 1.0 / (d as f64).sqrt() / (2.0 * depth).sqrt();
        let out_ff = 1.0 / (config.d_ff as f64).sqrt() / (2.0 * depth).sqrt();
        store.insert("embed.w", init.normal(vec![config.vocab_size, d], 1.0 / (d as f64).sqrt()));
        for i in 0..config.encoder_layers {
            add_layer_norm(&mut store, &format!("encoder.{i}.ln1"), d);
            add_attention(&mut store, &mut init, &format!("encoder.{i}.self"), d, out_attn);
            add_layer_norm(&mut store, &format!("encoder.{i}.ln2"), d);
            add_ffn(&mut store, &mut init, &format!("encoder.{i}.ff"), d, config.d_ff, out_ff);
        }
        if config.encoder_layers > 0 {
            add_layer_norm(&mut store, "encoder.ln", d);
        }
        for i in 0..config.decoder_layers {
            add_layer_norm(&mut store, &format!("decoder.{i}.ln1"), d);
            add_attention(&mut store, &mut init, &format!("decoder.{i}.self"), d, out_attn);
            if config.arch == Arch::EncoderDecoder {
                add_layer_norm(&mut store, &format!("decoder.{i}.ln2"), d);
                add_attention(&mut store, &mut init, &format!("decoder.{i}.cross"), d, out_attn);
            }
            add_layer_norm(&mut store, &format!("decoder.{i}.ln3"), d);
            add_ffn(&mut store, &mut init, &format!("decoder.{i}.ff"), d, config.d_ff, out_ff);
        }
        add_layer_norm(&mut store, "decoder.ln", d);
        if !config.tie_embeddings {
            store.insert("lm_head.w", init.normal(vec![d, config.vocab_size], 1.0 / (d as f64).sqrt()));
        }
        store.insert("lm_head.b", Tensor::zeros(vec![config.vocab_size]));
        Ok(Self::from_parts(config, store))
    }

    fn from_parts(config: ModelConfig, params: ParamStore) -> Self {
        let positions = sinusoidal(config.max_len + 1, config.d_model);
        Self { config, params, positions }
    }

    /// Wraps an existing store after checking it holds every expected tensor.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        let mut params = params;
        params.set_trainable(true);
        Ok(Self::from_parts(config, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    pub(crate) fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub(crate) fn weight(&self, name: &str) -> &[f64] {
        self.params.get(name).unwrap_or_else(|| panic!("model is missing parameter {name}")).data()
    }

    /// Copy whose parameters never receive gradients.
    pub fn frozen(&self) -> Self {
        let mut m = self.clone();
        m.params.set_trainable(false);
        m
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, serde_json::to_value(&self.config)?, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (manifest, store) = load_checkpoint(path)?;
        let config: ModelConfig = serde_json::from_value(manifest.config)?;
        Self::from_params(config, store)
    }

    /// Keeps only the first and last layers of one part; weights are copied.
    pub fn prune_layers(&self, part: Part) -> Result<Self> {
        let (prefix, count) = match part {
            Part::Encoder => ("encoder", self.config.encoder_layers),
            Part::Decoder => ("decoder", self.config.decoder_layers),
        };
        if count < 2 {
            return Err(Error::Config(format!("cannot prune {prefix} with {count} layer(s)")));
        }
        let keep = [0, count - 1];
        let mut config = self.config.clone();
        match part {
            Part::Encoder => config.encoder_layers = 2,
            Part::Decoder => config.decoder_layers = 2,
        }
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter() {
            let rest = name.strip_prefix(prefix).and_then(|r| r.strip_prefix('.'));
            let layer = rest.and_then(|r| r.split('.').next()).and_then(|s| s.parse::<usize>().ok());
            match layer {
                Some(l) => {
                    if let Some(new_idx) = keep.iter().position(|&k| k == l) {
                        let suffix = &rest.expect("checked")[l.to_string().len()..];
                        store.insert(format!("{prefix}.{new_idx}{suffix}"), t.clone());
                    }
                }
                None => {
                    store.insert(name.to_string(), t.clone());
                }
            }
        }
        Self::from_params(config, store)
    }

    /// Parameters belonging to one layer of one part.
    pub fn layer_parameter_count(&self, part: Part, layer: usize) -> usize {
        let prefix = match part {
            Part::Encoder => format!("encoder.{layer}."),
            Part::Decoder => format!("decoder.{layer}."),
        };
        self.params.iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, t)| t.numel()).sum()
    }
}
