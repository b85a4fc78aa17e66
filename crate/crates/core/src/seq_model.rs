//! Transformer encoder-decoder with rating-deviation embeddings,
//! multi-source attention averaging and gated multimodal fusion.
//!
//! Layout is pre-norm with learned positions and a GELU feed-forward. The
//! token embedding is shared by the encoder, the decoder, the output
//! projection and the table encoder.
//!
//! Every decoder layer's cross-attention attends to each source block
//! separately with the same projections, averages the per-head results over
//! the blocks of a modality and then applies the output projection, giving
//! `ma_text`, `ma_img` and `ma_table`. They are fused as
//! `ma_text + α ⊙ ma_img + β ⊙ ma_table` with
//! `α = ReLU(tanh([ma_text; ma_img] W_α))` and `β` likewise; an absent
//! modality contributes nothing. Without text, exactly one other modality
//! is attended and no gate is used.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId};
use crate::corpus::vocab::{Vocab, BOS};
use crate::corpus::{TableData, TokenId};
use crate::image::{ImageConfig, ImageError, ImageParams, RasterImage};
use crate::params::{normal_init, ParamId, ParamStore};
use crate::table::{TableConfig, TableError, TableParams};
use crate::tensor::{log_softmax_rows, Matrix};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("no source reviews")]
    NoSources,
    #[error("no input modality")]
    NoModality,
    #[error("without text exactly one other modality may be given")]
    AmbiguousModality,
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("image: {0}")]
    Image(#[from] ImageError),
    #[error("table: {0}")]
    Table(#[from] TableError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_categories: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub ffn: usize,
    /// `l_D`, the longest encoder or decoder sequence.
    pub max_len: usize,
    pub dropout: f64,
    pub gate_init_std: f64,
    pub image: ImageConfig,
    pub table: TableConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            num_categories: 0,
            d_model: 64,
            heads: 4,
            layers_enc: 2,
            layers_dec: 2,
            ffn: 256,
            max_len: 128,
            dropout: 0.0,
            gate_init_std: 1e-3,
            image: ImageConfig::default(),
            table: TableConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults sized for `vocab`.
    pub fn for_vocab(vocab: &Vocab) -> Self {
        Self { vocab_size: vocab.len(), num_categories: vocab.num_categories(), ..Self::default() }
    }

    /// A tiny configuration for exhaustive checks.
    pub fn micro(vocab_size: usize, num_categories: usize) -> Self {
        Self {
            vocab_size,
            num_categories,
            d_model: 4,
            heads: 1,
            layers_enc: 1,
            layers_dec: 1,
            ffn: 8,
            max_len: 12,
            dropout: 0.0,
            gate_init_std: 1e-3,
            image: ImageConfig { channels: 3, height: 4, width: 4, block_channels: [2, 3, 4, 2], ..ImageConfig::default() },
            table: TableConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers_dec == 0 || self.ffn == 0 || self.max_len < 2 {
            return fail("layers_dec, ffn must be positive and max_len at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.image.validate().map_err(ModelError::Config)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross: AttentionParams,
    pub ln3: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub tok: ParamId,
    pub enc_pos: ParamId,
    pub dec_pos: ParamId,
    pub dev: ParamId,
    pub enc: Vec<EncoderLayer>,
    pub enc_ln: LayerNormParams,
    pub dec: Vec<DecoderLayer>,
    pub dec_ln: LayerNormParams,
    pub w_alpha: ParamId,
    pub w_beta: ParamId,
    pub image: ImageParams,
    pub table: TableParams,
}

/// Parameter groups by name.
pub mod groups {
    pub fn is_deviation(name: &str) -> bool {
        name == "dec.dev"
    }

    /// Text encoder, decoder and shared embeddings, deviation embedding included.
    pub fn is_text(name: &str) -> bool {
        name.starts_with("emb.") || name.starts_with("enc.") || name.starts_with("dec.")
    }

    pub fn is_gate(name: &str) -> bool {
        name.starts_with("gate.")
    }

    pub fn is_image(name: &str) -> bool {
        name.starts_with("img.")
    }

    pub fn is_table(name: &str) -> bool {
        name.starts_with("table.")
    }
}

/// Dropout state for one forward pass; inference passes use [`Ctx::eval`].
pub struct Ctx<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    rate: f64,
}

impl<'r> Ctx<'r> {
    pub fn eval() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    pub fn train(rng: &'r mut ChaCha8Rng, rate: f64) -> Self {
        Self { rng: Some(rng), rate }
    }

    fn dropout(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_deref_mut() else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let (r, c) = g.value(x).shape();
        let keep = 1.0 / (1.0 - self.rate);
        let mask = Matrix::from_vec(r, c, (0..r * c).map(|_| if rng.random_bool(self.rate) { 0.0 } else { keep }).collect());
        let m = g.input(mask);
        g.mul(x, m)
    }
}

/// Encoder outputs, one node per block.
#[derive(Clone, Debug, Default)]
pub struct EncodedBlocks {
    pub text: Vec<NodeId>,
    pub image: Vec<NodeId>,
    pub table: Option<NodeId>,
}

#[derive(Clone, Copy, Debug)]
pub struct Kv<T> {
    pub k: T,
    pub v: T,
}

#[derive(Clone, Debug)]
pub struct LayerMemory<T> {
    pub text: Vec<Kv<T>>,
    pub image: Vec<Kv<T>>,
    pub table: Vec<Kv<T>>,
}

/// Cross-attention keys and values of every block for every decoder layer.
#[derive(Clone, Debug)]
pub struct Memory<T = NodeId> {
    pub layers: Vec<LayerMemory<T>>,
}

impl<T: Clone> Memory<T> {
    /// Keeps only the text blocks at `indices`.
    pub fn select_text(&self, indices: &[usize]) -> Self {
        Memory {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    text: indices.iter().map(|&i| l.text[i].clone()).collect(),
                    image: l.image.clone(),
                    table: l.table.clone(),
                })
                .collect(),
        }
    }

    pub fn without_image(&self) -> Self {
        let mut m = self.clone();
        m.layers.iter_mut().for_each(|l| l.image.clear());
        m
    }

    pub fn without_table(&self) -> Self {
        let mut m = self.clone();
        m.layers.iter_mut().for_each(|l| l.table.clear());
        m
    }

    pub fn has_image(&self) -> bool {
        self.layers.first().is_some_and(|l| !l.image.is_empty())
    }

    pub fn has_table(&self) -> bool {
        self.layers.first().is_some_and(|l| !l.table.is_empty())
    }
}

impl Memory<NodeId> {
    /// Copies the values out of `g` so later graphs can reuse them.
    pub fn freeze(&self, g: &Graph) -> Memory<Matrix> {
        let f = |kv: &Kv<NodeId>| Kv { k: g.value(kv.k).clone(), v: g.value(kv.v).clone() };
        Memory {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    text: l.text.iter().map(f).collect(),
                    image: l.image.iter().map(f).collect(),
                    table: l.table.iter().map(f).collect(),
                })
                .collect(),
        }
    }
}

impl Memory<Matrix> {
    pub fn load(&self, g: &mut Graph) -> Memory<NodeId> {
        let mut f = |kv: &Kv<Matrix>| Kv { k: g.input(kv.k.clone()), v: g.input(kv.v.clone()) };
        Memory {
            layers: self
                .layers
                .iter()
                .map(|l| LayerMemory {
                    text: l.text.iter().map(&mut f).collect(),
                    image: l.image.iter().map(&mut f).collect(),
                    table: l.table.iter().map(&mut f).collect(),
                })
                .collect(),
        }
    }
}

pub struct DecoderOutput {
    /// `len × vocab` (or `1 × vocab` for the last position only).
    pub logits: NodeId,
    /// Per decoder layer, the α gate (`len × e_D`) when images were fused.
    pub alpha: Vec<Option<NodeId>>,
    pub beta: Vec<Option<NodeId>>,
}

/// Raw inputs of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ModalInputs<'a> {
    pub text: Vec<&'a [TokenId]>,
    pub images: &'a [RasterImage],
    pub table: Option<&'a TableData>,
}

/// Model structure without parameter values; all forward computations live
/// here so they can run against any store with the same layout.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    pub params: ModelParams,
}

#[derive(Clone)]
pub struct Model {
    pub store: ParamStore,
    pub net: Network,
}

impl std::ops::Deref for Model {
    type Target = Network;

    fn deref(&self) -> &Network {
        &self.net
    }
}

fn ln(store: &mut ParamStore, name: &str, d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: store.add(format!("{name}.g"), Matrix::filled(1, d, 1.0)),
        beta: store.add(format!("{name}.b"), Matrix::zeros(1, d)),
    }
}

fn attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize) -> AttentionParams {
    let s = 1.0 / (d as f64).sqrt();
    AttentionParams {
        wq: store.add(format!("{name}.wq"), normal_init(rng, d, d, s)),
        wk: store.add(format!("{name}.wk"), normal_init(rng, d, d, s)),
        wv: store.add(format!("{name}.wv"), normal_init(rng, d, d, s)),
        wo: store.add(format!("{name}.wo"), normal_init(rng, d, d, s)),
    }
}

fn ffn(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d: usize, h: usize) -> FeedForwardParams {
    FeedForwardParams {
        w1: store.add(format!("{name}.w1"), normal_init(rng, d, h, 1.0 / (d as f64).sqrt())),
        b1: store.add(format!("{name}.b1"), Matrix::zeros(1, h)),
        w2: store.add(format!("{name}.w2"), normal_init(rng, h, d, 1.0 / (h as f64).sqrt())),
        b2: store.add(format!("{name}.b2"), Matrix::zeros(1, d)),
    }
}

impl Model {
    /// Registers all parameters; identical `(config, vocab, seed)` give
    /// identical stores.
    pub fn new(config: &ModelConfig, vocab: &Vocab, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if config.vocab_size != vocab.len() || config.num_categories != vocab.num_categories() {
            return Err(ModelError::Config(format!(
                "config expects {} words / {} categories, vocabulary has {} / {}",
                config.vocab_size,
                config.num_categories,
                vocab.len(),
                vocab.num_categories()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let s = 1.0 / (d as f64).sqrt();
        let tok = store.add("emb.tok", normal_init(&mut rng, config.vocab_size, d, s));
        let enc_pos = store.add("enc.pos", normal_init(&mut rng, config.max_len, d, s));
        let dec_pos = store.add("dec.pos", normal_init(&mut rng, config.max_len, d, s));
        let dev = store.add("dec.dev", normal_init(&mut rng, 1, d, s));
        let enc = (0..config.layers_enc)
            .map(|i| EncoderLayer {
                ln1: ln(&mut store, &format!("enc.{i}.ln1"), d),
                attn: attn(&mut store, &mut rng, &format!("enc.{i}.attn"), d),
                ln2: ln(&mut store, &format!("enc.{i}.ln2"), d),
                ffn: ffn(&mut store, &mut rng, &format!("enc.{i}.ffn"), d, config.ffn),
            })
            .collect();
        let enc_ln = ln(&mut store, "enc.ln", d);
        let dec = (0..config.layers_dec)
            .map(|i| DecoderLayer {
                ln1: ln(&mut store, &format!("dec.{i}.ln1"), d),
                self_attn: attn(&mut store, &mut rng, &format!("dec.{i}.self"), d),
                ln2: ln(&mut store, &format!("dec.{i}.ln2"), d),
                cross: attn(&mut store, &mut rng, &format!("dec.{i}.cross"), d),
                ln3: ln(&mut store, &format!("dec.{i}.ln3"), d),
                ffn: ffn(&mut store, &mut rng, &format!("dec.{i}.ffn"), d, config.ffn),
            })
            .collect();
        let dec_ln = ln(&mut store, "dec.ln", d);
        let w_alpha = store.add("gate.w_alpha", normal_init(&mut rng, 2 * d, d, config.gate_init_std));
        let w_beta = store.add("gate.w_beta", normal_init(&mut rng, 2 * d, d, config.gate_init_std));
        let image = ImageParams::register(&mut store, &mut rng, &config.image, d);
        let table = TableParams::register(&mut store, &mut rng, &config.table, vocab, d, d);
        let params =
            ModelParams { tok, enc_pos, dec_pos, dev, enc, enc_ln, dec, dec_ln, w_alpha, w_beta, image, table };
        Ok(Self { store, net: Network { config: config.clone(), params } })
    }
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn layer_norm(g: &mut Graph, x: NodeId, p: LayerNormParams) -> NodeId {
        let (gm, bt) = (g.param(p.gamma), g.param(p.beta));
        g.layer_norm(x, gm, bt)
    }

    fn feed_forward(g: &mut Graph, x: NodeId, p: FeedForwardParams) -> NodeId {
        let (w1, b1, w2, b2) = (g.param(p.w1), g.param(p.b1), g.param(p.w2), g.param(p.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.gelu(h);
        let o = g.matmul(h, w2);
        g.add_row(o, b2)
    }

    fn self_attention(&self, g: &mut Graph, x: NodeId, p: AttentionParams, causal: bool) -> NodeId {
        let (wq, wk, wv, wo) = (g.param(p.wq), g.param(p.wk), g.param(p.wv), g.param(p.wo));
        let q = g.matmul(x, wq);
        let k = g.matmul(x, wk);
        let v = g.matmul(x, wv);
        let a = g.attention(q, k, v, self.config.heads, causal);
        g.matmul(a, wo)
    }

    fn positions(&self, g: &mut Graph, table: ParamId, len: usize) -> NodeId {
        let p = g.param(table);
        let ids: Vec<u32> = (0..len as u32).collect();
        g.embed(p, &ids)
    }

    fn check_len(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        if tokens.len() > self.config.max_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_len });
        }
        Ok(())
    }

    /// One source review into an `len × e_D` block.
    pub fn encode_text(&self, g: &mut Graph, ctx: &mut Ctx, tokens: &[TokenId]) -> Result<NodeId, ModelError> {
        self.check_len(tokens)?;
        let tok = g.param(self.params.tok);
        let e = g.embed(tok, tokens);
        let pos = self.positions(g, self.params.enc_pos, tokens.len());
        let x = g.add(e, pos);
        let mut x = ctx.dropout(g, x);
        for layer in &self.params.enc {
            let h = Self::layer_norm(g, x, layer.ln1);
            let h = self.self_attention(g, h, layer.attn, false);
            let h = ctx.dropout(g, h);
            x = g.add(x, h);
            let h = Self::layer_norm(g, x, layer.ln2);
            let h = Self::feed_forward(g, h, layer.ffn);
            let h = ctx.dropout(g, h);
            x = g.add(x, h);
        }
        Ok(Self::layer_norm(g, x, self.params.enc_ln))
    }

    /// `h_text`: sources are encoded independently, one block each.
    pub fn encode_sources(&self, g: &mut Graph, ctx: &mut Ctx, sources: &[&[TokenId]]) -> Result<Vec<NodeId>, ModelError> {
        if sources.is_empty() {
            return Err(ModelError::NoSources);
        }
        sources.iter().map(|s| self.encode_text(g, ctx, s)).collect()
    }

    pub fn encode_images(&self, g: &mut Graph, images: &[RasterImage]) -> Result<Vec<NodeId>, ModelError> {
        Ok(self.params.image.encode_images(g, images)?)
    }

    pub fn encode_table(&self, g: &mut Graph, table: &TableData) -> Result<NodeId, ModelError> {
        let tok = g.param(self.params.tok);
        Ok(self.params.table.encode_table(g, tok, table)?)
    }

    /// Encodes every present modality. Empty image lists and empty tables
    /// count as absent.
    pub fn encode_inputs(&self, g: &mut Graph, ctx: &mut Ctx, inputs: &ModalInputs) -> Result<EncodedBlocks, ModelError> {
        let text = if inputs.text.is_empty() { Vec::new() } else { self.encode_sources(g, ctx, &inputs.text)? };
        let image = self.encode_images(g, inputs.images)?;
        let table = match inputs.table {
            Some(t) if !t.is_empty() => Some(self.encode_table(g, t)?),
            _ => None,
        };
        Ok(EncodedBlocks { text, image, table })
    }

    /// Projects every block into the keys and values of every decoder layer.
    pub fn project_memory(&self, g: &mut Graph, blocks: &EncodedBlocks) -> Memory {
        let layers = self
            .params
            .dec
            .iter()
            .map(|layer| {
                let (wk, wv) = (g.param(layer.cross.wk), g.param(layer.cross.wv));
                let mut kv = |b: &NodeId| Kv { k: g.matmul(*b, wk), v: g.matmul(*b, wv) };
                LayerMemory {
                    text: blocks.text.iter().map(&mut kv).collect(),
                    image: blocks.image.iter().map(&mut kv).collect(),
                    table: blocks.table.iter().map(&mut kv).collect(),
                }
            })
            .collect();
        Memory { layers }
    }

    /// Per-head attention against each block, averaged over blocks, then the
    /// output projection.
    pub fn multi_source_attention(&self, g: &mut Graph, q: NodeId, blocks: &[Kv<NodeId>], wo: ParamId) -> NodeId {
        assert!(!blocks.is_empty(), "multi-source attention needs a block");
        let heads = self.config.heads;
        let outs: Vec<NodeId> = blocks.iter().map(|b| g.attention(q, b.k, b.v, heads, false)).collect();
        let avg = if outs.len() == 1 { outs[0] } else { g.mean(&outs) };
        let wo = g.param(wo);
        g.matmul(avg, wo)
    }

    /// `ma_text + α ⊙ ma_img + β ⊙ ma_table`, returning the gates used.
    pub fn fuse_modalities(
        &self,
        g: &mut Graph,
        ma_text: NodeId,
        ma_img: Option<NodeId>,
        ma_table: Option<NodeId>,
    ) -> (NodeId, Option<NodeId>, Option<NodeId>) {
        let mut parts = vec![ma_text];
        let mut gate = |g: &mut Graph, other: Option<NodeId>, w: ParamId| {
            other.map(|m| {
                let cat = g.concat_cols(&[ma_text, m]);
                let w = g.param(w);
                let pre = g.matmul(cat, w);
                let a = g.relu_tanh(pre);
                parts.push(g.mul(a, m));
                a
            })
        };
        let alpha = gate(g, ma_img, self.params.w_alpha);
        let beta = gate(g, ma_table, self.params.w_beta);
        let fused = if parts.len() == 1 { ma_text } else { g.sum(&parts, 1.0) };
        (fused, alpha, beta)
    }

    /// Decoder input rows `tok[y_t] + sd·dev + pos[t]`.
    pub fn embed_decoder_inputs(&self, g: &mut Graph, tokens: &[TokenId], sd: f64) -> Result<NodeId, ModelError> {
        self.check_len(tokens)?;
        let tok = g.param(self.params.tok);
        let e = g.embed(tok, tokens);
        let dev = g.param(self.params.dev);
        let dev = g.scale(dev, sd);
        let e = g.add_row(e, dev);
        let pos = self.positions(g, self.params.dec_pos, tokens.len());
        Ok(g.add(e, pos))
    }

    /// Runs the decoder over `tokens` against `memory`.
    pub fn decode(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        memory: &Memory,
        tokens: &[TokenId],
        sd: f64,
        last_only: bool,
    ) -> Result<DecoderOutput, ModelError> {
        let first = memory.layers.first().ok_or(ModelError::NoModality)?;
        let has_text = !first.text.is_empty();
        if !has_text {
            match (first.image.is_empty(), first.table.is_empty()) {
                (true, true) => return Err(ModelError::NoModality),
                (false, false) => return Err(ModelError::AmbiguousModality),
                _ => {}
            }
        }
        let x = self.embed_decoder_inputs(g, tokens, sd)?;
        let mut x = ctx.dropout(g, x);
        let (mut alpha, mut beta) = (Vec::new(), Vec::new());
        for (layer, mem) in self.params.dec.iter().zip(&memory.layers) {
            let h = Self::layer_norm(g, x, layer.ln1);
            let h = self.self_attention(g, h, layer.self_attn, true);
            let h = ctx.dropout(g, h);
            x = g.add(x, h);

            let h = Self::layer_norm(g, x, layer.ln2);
            let wq = g.param(layer.cross.wq);
            let q = g.matmul(h, wq);
            let ma = |g: &mut Graph, blocks: &[Kv<NodeId>]| {
                (!blocks.is_empty()).then(|| self.multi_source_attention(g, q, blocks, layer.cross.wo))
            };
            let ma_img = ma(g, &mem.image);
            let ma_table = ma(g, &mem.table);
            let h = if has_text {
                let ma_text = ma(g, &mem.text).expect("text present");
                let (fused, a, b) = self.fuse_modalities(g, ma_text, ma_img, ma_table);
                alpha.push(a);
                beta.push(b);
                fused
            } else {
                alpha.push(None);
                beta.push(None);
                ma_img.or(ma_table).expect("one modality present")
            };
            let h = ctx.dropout(g, h);
            x = g.add(x, h);

            let h = Self::layer_norm(g, x, layer.ln3);
            let h = Self::feed_forward(g, h, layer.ffn);
            let h = ctx.dropout(g, h);
            x = g.add(x, h);
        }
        let mut x = Self::layer_norm(g, x, self.params.dec_ln);
        if last_only {
            let d = self.config.d_model;
            let off = (tokens.len() - 1) * d;
            x = g.gather(x, (off as u32..(off + d) as u32).collect(), 1, d);
        }
        let tok = g.param(self.params.tok);
        let logits = g.matmul_t(x, false, tok, true);
        Ok(DecoderOutput { logits, alpha, beta })
    }

    /// Decoder input `[bos] + review` and target `review + [eos]`, both cut
    /// to `max_len`.
    pub fn teacher_forcing(&self, review: &[TokenId]) -> (Vec<TokenId>, Vec<TokenId>) {
        let n = (review.len() + 1).min(self.config.max_len);
        let mut input = Vec::with_capacity(n);
        input.push(BOS);
        input.extend_from_slice(&review[..n - 1]);
        let mut target: Vec<TokenId> = review.iter().copied().take(n).collect();
        if target.len() < n {
            target.push(crate::corpus::vocab::EOS);
        }
        (input, target)
    }

}

impl Model {
    /// Per-position log-probabilities for decoder input `tokens`, encoding
    /// all given modalities from scratch.
    pub fn forward_log_probs(&self, inputs: &ModalInputs, tokens: &[TokenId], sd: f64) -> Result<Matrix, ModelError> {
        let mut g = Graph::inference(&self.store);
        let mut ctx = Ctx::eval();
        let blocks = self.encode_inputs(&mut g, &mut ctx, inputs)?;
        let memory = self.project_memory(&mut g, &blocks);
        let out = self.decode(&mut g, &mut ctx, &memory, tokens, sd, false)?;
        Ok(log_softmax_rows(g.value(out.logits)))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let bytes = checkpoint::encode(&self.config, &self.store);
        let tmp = path.with_extension("tmp");
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&bytes).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self, ModelError> {
        let bytes = fs::read(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
        Self::from_checkpoint_bytes(&bytes, vocab)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], vocab: &Vocab) -> Result<Self, ModelError> {
        let (config, tensors) = checkpoint::decode(bytes)?;
        let mut model = Self::new(&config, vocab, 0)?;
        model.load_tensors(tensors)?;
        Ok(model)
    }

    /// Copies named tensors into the store; every stored tensor must be given
    /// with a matching shape.
    pub fn load_tensors(&mut self, tensors: Vec<(String, Matrix)>) -> Result<(), ModelError> {
        if tensors.len() != self.store.len() {
            return Err(ModelError::Checkpoint(format!(
                "{} tensors in checkpoint, model has {}",
                tensors.len(),
                self.store.len()
            )));
        }
        for (name, m) in tensors {
            let id = self.store.id(&name).ok_or_else(|| ModelError::Checkpoint(format!("unknown tensor `{name}`")))?;
            if self.store.get(id).shape() != m.shape() {
                return Err(ModelError::Checkpoint(format!("tensor `{name}` has shape {:?}", m.shape())));
            }
            *self.store.get_mut(id) = m;
        }
        Ok(())
    }

    /// Copies every tensor of `other` whose name and shape match.
    pub fn copy_from(&mut self, other: &Model) {
        for (_, name, m) in other.store.iter() {
            if let Some(id) = self.store.id(name) {
                if self.store.get(id).shape() == m.shape() {
                    *self.store.get_mut(id) = m.clone();
                }
            }
        }
    }
}

/// Binary checkpoint container.
///
/// ```text
/// magic   8 bytes  "MSUMCKP1"
/// hlen    u64 LE   length of the JSON header
/// header  JSON     {"config": ModelConfig, "tensors": [{"name", "rows", "cols"}, ...]}
/// data    f64 LE   tensors in header order, row-major
/// ```
pub mod checkpoint {
    use super::*;

    pub const MAGIC: &[u8; 8] = b"MSUMCKP1";

    #[derive(Serialize, Deserialize)]
    struct TensorEntry {
        name: String,
        rows: usize,
        cols: usize,
    }

    #[derive(Serialize, Deserialize)]
    struct Header {
        config: ModelConfig,
        tensors: Vec<TensorEntry>,
    }

    pub fn encode(config: &ModelConfig, store: &ParamStore) -> Vec<u8> {
        let header = Header {
            config: config.clone(),
            tensors: store.iter().map(|(_, n, m)| TensorEntry { name: n.to_string(), rows: m.rows(), cols: m.cols() }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + store.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, m) in store.iter() {
            for x in m.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<(ModelConfig, Vec<(String, Matrix)>), ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let mut off = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n = t.rows * t.cols;
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push((t.name, Matrix::from_vec(t.rows, t.cols, data)));
            off += 8 * n;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok((header.config, tensors))
    }
}
