//! The four training stages.
//!
//! 0. Denoising: reconstruct each training review from a corrupted copy.
//! 1. Text: leave-one-out pairs, rating deviation active.
//! 2. Other modalities: image or table encoder alone feeding the frozen
//!    decoder, one review as the target.
//! 3. Multimodal: leave-one-out pairs with gated fusion of all modalities.
//!
//! Each stage trains a declared subset of tensors with AdamW, a linear
//! warmup/decay schedule and label-smoothed NLL.

pub mod noise;
pub mod optim;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, NodeId};
use crate::corpus::vocab::Vocab;
use crate::corpus::{build_leave_one_out_pairs, flatten_multireference, Entity, ReferencePair, TokenId};
use crate::image::{ImageConfig, USED_BLOCKS};
use crate::params::{ParamMask, ParamStore};
use crate::seq_model::{groups, Ctx, ModalInputs, Model, ModelError, Network};
use noise::{noise_review, NoiseConfig};
use optim::{AdamConfig, AdamW, LinearSchedule};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no training data for stage {0}")]
    Empty(u8),
    #[error("no entity has {0:?} data")]
    ModalityAbsent(Modality),
    #[error("loss became non-finite at stage {stage} step {step}")]
    NonFinite { stage: u8, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    /// Reviews (stage 0), entities (stages 1 and 3) or pairs (stage 2).
    pub batch_size: usize,
    pub epochs: usize,
    /// Warmup length in epochs.
    pub warmup: f64,
    pub lr: f64,
    pub max_grad_norm: Option<f64>,
    pub label_smoothing: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::full_scale(1)
    }
}

impl StageConfig {
    /// Settings of the full-scale setup. Stage 0 reuses the stage-1 values.
    pub fn full_scale(stage: u8) -> Self {
        let (batch_size, epochs, warmup, lr, clip) = match stage {
            0 | 1 => (16, 5, 0.5, 5e-5, None),
            2 => (32, 20, 1.0, 1e-4, Some(1.0)),
            _ => (8, 5, 0.25, 1e-5, Some(1.0)),
        };
        Self { batch_size, epochs, warmup, lr, max_grad_norm: clip, label_smoothing: 0.1, weight_decay: 0.1, seed: 0 }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { weight_decay: self.weight_decay, ..AdamConfig::default() }
    }
}

/// Per-stage settings of a desk-scale run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage0: StageConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub noise: NoiseConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let desk = |stage: u8, batch_size, epochs, lr| StageConfig { batch_size, epochs, lr, ..StageConfig::full_scale(stage) };
        Self {
            stage0: desk(0, 16, 4, 2e-3),
            stage1: desk(1, 4, 6, 1e-3),
            stage2: desk(2, 16, 3, 1e-3),
            stage3: desk(3, 4, 4, 5e-4),
            noise: NoiseConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        for (i, s) in [&mut self.stage0, &mut self.stage1, &mut self.stage2, &mut self.stage3].into_iter().enumerate() {
            s.seed = seed.wrapping_mul(4).wrapping_add(i as u64);
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u8,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    /// Global norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: u8,
    pub steps: usize,
    pub train_losses: Vec<f64>,
    /// Validation loss before training and after every epoch.
    pub val_losses: Vec<f64>,
    /// Tensors whose values changed.
    pub changed: Vec<String>,
}

impl StageOutcome {
    pub fn relative_val_drop(&self) -> f64 {
        let first = self.val_losses[0];
        let last = *self.val_losses.last().unwrap();
        (first - last) / first
    }
}

/// Which non-text modalities stage 3 fuses, and whether the gates train.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionOptions {
    pub use_image: bool,
    pub use_table: bool,
    pub freeze_gates: bool,
}

impl Default for FusionOptions {
    fn default() -> Self {
        Self { use_image: true, use_table: true, freeze_gates: false }
    }
}

fn image_block_trainable(name: &str, cfg: &ImageConfig) -> bool {
    (cfg.frozen_prefix + 1..=USED_BLOCKS).any(|b| name.starts_with(&ImageConfig::block_param_prefix(b)))
        || name == "img.proj"
}

/// The tensors a stage may change.
pub fn trainable_mask(store: &ParamStore, image: &ImageConfig, stage: u8, modality: Option<Modality>, fusion: FusionOptions) -> ParamMask {
    ParamMask::from_predicate(store, |n| match stage {
        0 => groups::is_text(n) && !groups::is_deviation(n),
        1 => groups::is_text(n),
        2 => match modality {
            Some(Modality::Image) => image_block_trainable(n, image),
            Some(Modality::Table) => groups::is_table(n),
            None => false,
        },
        _ => {
            groups::is_text(n)
                || (groups::is_gate(n) && !fusion.freeze_gates)
                || (fusion.use_image && image_block_trainable(n, image))
                || (fusion.use_table && groups::is_table(n))
        }
    })
}

/// Names of tensors that differ between two stores of the same layout.
pub fn changed_tensors(before: &ParamStore, after: &ParamStore) -> Vec<String> {
    before
        .iter()
        .zip(after.iter())
        .filter(|((_, _, a), (_, _, b))| a != b)
        .map(|((_, n, _), _)| n.to_string())
        .collect()
}

/// Splits off the last `fraction` of entities for validation.
pub fn split_validation(entities: &[Entity], fraction: f64) -> (&[Entity], &[Entity]) {
    let n_val = ((entities.len() as f64) * fraction).round() as usize;
    entities.split_at(entities.len() - n_val.min(entities.len()))
}

pub fn sentence_terminators(vocab: &Vocab) -> Vec<TokenId> {
    [".", "!", "?"].iter().map(|w| vocab.token_id(w)).filter(|&t| t != crate::corpus::vocab::UNK).collect()
}

fn seq_loss(
    net: &Network,
    g: &mut Graph,
    ctx: &mut Ctx,
    memory: &crate::seq_model::Memory,
    review: &[TokenId],
    sd: f64,
    eps: f64,
) -> Result<NodeId, TrainError> {
    let (input, target) = net.teacher_forcing(review);
    let out = net.decode(g, ctx, memory, &input, sd, false)?;
    Ok(g.smoothed_nll(out.logits, &target, None, eps))
}

/// Mean leave-one-out loss of one entity; every review is encoded once and
/// shared by all pairs.
pub fn entity_loss(
    net: &Network,
    g: &mut Graph,
    ctx: &mut Ctx,
    entity: &Entity,
    fusion: FusionOptions,
    eps: f64,
) -> Result<NodeId, TrainError> {
    let pairs = build_leave_one_out_pairs(entity).map_err(|_| TrainError::Empty(1))?;
    let text: Vec<&[TokenId]> = entity.reviews.iter().map(|r| r.tokens.as_slice()).collect();
    let inputs = ModalInputs {
        text,
        images: if fusion.use_image { &entity.images } else { &[] },
        table: if fusion.use_table { Some(&entity.table) } else { None },
    };
    let blocks = net.encode_inputs(g, ctx, &inputs)?;
    let memory = net.project_memory(g, &blocks);
    let mut losses = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let mem = memory.select_text(&p.sources);
        losses.push(seq_loss(net, g, ctx, &mem, &entity.reviews[p.target].tokens, p.sd, eps)?);
    }
    Ok(g.mean(&losses))
}

/// Loss of one single-reference pair using only `modality`.
pub fn reference_loss(
    net: &Network,
    g: &mut Graph,
    ctx: &mut Ctx,
    entity: &Entity,
    target: usize,
    modality: Modality,
    eps: f64,
) -> Result<NodeId, TrainError> {
    let inputs = match modality {
        Modality::Image => ModalInputs { text: vec![], images: &entity.images, table: None },
        Modality::Table => ModalInputs { text: vec![], images: &[], table: Some(&entity.table) },
    };
    let blocks = net.encode_inputs(g, ctx, &inputs)?;
    let memory = net.project_memory(g, &blocks);
    seq_loss(net, g, ctx, &memory, &entity.reviews[target].tokens, 0.0, eps)
}

/// Loss of reconstructing `review` from `noised`.
pub fn denoise_loss(
    net: &Network,
    g: &mut Graph,
    ctx: &mut Ctx,
    noised: &[TokenId],
    review: &[TokenId],
    eps: f64,
) -> Result<NodeId, TrainError> {
    let block = net.encode_text(g, ctx, noised)?;
    let blocks = crate::seq_model::EncodedBlocks { text: vec![block], ..Default::default() };
    let memory = net.project_memory(g, &blocks);
    seq_loss(net, g, ctx, &memory, review, 0.0, eps)
}

fn has_modality(e: &Entity, m: Modality) -> bool {
    match m {
        Modality::Image => !e.images.is_empty(),
        Modality::Table => !e.table.is_empty(),
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Shared optimization loop over `items`.
#[allow(clippy::too_many_arguments)]
fn run_stage<I>(
    model: &mut Model,
    stage: u8,
    items: &[I],
    cfg: &StageConfig,
    mask: ParamMask,
    sink: &mut dyn FnMut(&StepMetrics),
    mut loss: impl FnMut(&Network, &mut Graph, &mut Ctx, &I, &mut ChaCha8Rng) -> Result<NodeId, TrainError>,
    validate: &dyn Fn(&Model) -> Result<f64, TrainError>,
) -> Result<StageOutcome, TrainError> {
    if items.is_empty() {
        return Err(TrainError::Empty(stage));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d120);
    let batch = cfg.batch_size.max(1);
    let per_epoch = items.len().div_ceil(batch);
    let total = per_epoch * cfg.epochs;
    let schedule = LinearSchedule::new(cfg.lr, (cfg.warmup * per_epoch as f64).round() as usize, total);
    let mut opt = AdamW::new(&model.store, mask.clone(), cfg.adam());
    let before = model.store.clone();
    let dropout = model.config().dropout;

    let mut val_losses = vec![validate(model)?];
    let mut train_losses = Vec::with_capacity(total);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let mut grads = crate::params::Gradients::empty(model.store.len());
            let mut batch_loss = 0.0;
            for &i in chunk {
                let net = &model.net;
                let mut g = Graph::new(&model.store, mask.clone());
                let mut ctx = Ctx::train(&mut drop_rng, dropout);
                let l = loss(net, &mut g, &mut ctx, &items[i], &mut rng)?;
                batch_loss += g.value(l).get(0, 0);
                grads.accumulate(g.backward(l));
            }
            let scale = 1.0 / chunk.len() as f64;
            grads.scale(scale);
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(TrainError::NonFinite { stage, step });
            }
            let grad_norm = match cfg.max_grad_norm {
                Some(max) => grads.clip_global_norm(max),
                None => grads.global_norm(),
            };
            let lr = schedule.lr_at(step);
            opt.step(&mut model.store, &grads, lr);
            sink(&StepMetrics { stage, step, loss: batch_loss, lr, grad_norm });
            train_losses.push(batch_loss);
            step += 1;
        }
        val_losses.push(validate(model)?);
    }
    Ok(StageOutcome { stage, steps: step, train_losses, val_losses, changed: changed_tensors(&before, &model.store) })
}

/// Validation loss of stage 0: plain NLL of reconstructing each validation
/// review under a fixed corruption.
pub fn denoise_validation(model: &Model, val: &[Entity], noise: &NoiseConfig, terminators: &[TokenId], seed: u64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::new();
    for e in val {
        for r in &e.reviews {
            let noised = noise_review(&r.tokens, noise, terminators, &mut rng);
            let mut g = Graph::inference(&model.store);
            let l = denoise_loss(&model.net, &mut g, &mut Ctx::eval(), &noised, &r.tokens, 0.0)?;
            losses.push(g.value(l).get(0, 0));
        }
    }
    Ok(mean(losses))
}

/// Validation loss of stages 1 and 3: mean plain leave-one-out NLL.
pub fn leave_one_out_validation(model: &Model, val: &[Entity], fusion: FusionOptions) -> Result<f64, TrainError> {
    let mut losses = Vec::new();
    for e in val.iter().filter(|e| e.reviews.len() >= 2) {
        let mut g = Graph::inference(&model.store);
        let l = entity_loss(&model.net, &mut g, &mut Ctx::eval(), e, fusion, 0.0)?;
        losses.push(g.value(l).get(0, 0));
    }
    Ok(mean(losses))
}

/// Validation loss of stage 2: mean plain NLL over single-reference pairs.
pub fn reference_validation(model: &Model, val: &[Entity], modality: Modality) -> Result<f64, TrainError> {
    let mut losses = Vec::new();
    for e in val.iter().filter(|e| has_modality(e, modality)) {
        for t in 0..e.reviews.len() {
            let mut g = Graph::inference(&model.store);
            let l = reference_loss(&model.net, &mut g, &mut Ctx::eval(), e, t, modality, 0.0)?;
            losses.push(g.value(l).get(0, 0));
        }
    }
    Ok(mean(losses))
}

pub fn stage0_denoise_pretrain(
    model: &mut Model,
    train: &[Entity],
    val: &[Entity],
    vocab: &Vocab,
    cfg: &StageConfig,
    noise: &NoiseConfig,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<StageOutcome, TrainError> {
    let terms = sentence_terminators(vocab);
    let items: Vec<(usize, usize)> =
        train.iter().enumerate().flat_map(|(e, ent)| (0..ent.reviews.len()).map(move |r| (e, r))).collect();
    let mask = trainable_mask(&model.store, &model.config().image, 0, None, FusionOptions::default());
    let eps = cfg.label_smoothing;
    let val_seed = cfg.seed ^ 0x0a11_da7a;
    run_stage(
        model,
        0,
        &items,
        cfg,
        mask,
        sink,
        |net, g, ctx, &(e, r), rng| {
            let review = &train[e].reviews[r].tokens;
            let noised = noise_review(review, noise, &terms, rng);
            denoise_loss(net, g, ctx, &noised, review, eps)
        },
        &|m| denoise_validation(m, val, noise, &terms, val_seed),
    )
}

fn loo_entities(train: &[Entity]) -> Vec<usize> {
    train
        .iter()
        .enumerate()
        .filter(|(_, e)| {
            let ok = e.reviews.len() >= 2;
            if !ok {
                warn!("skipping entity `{}` with {} review(s)", e.id, e.reviews.len());
            }
            ok
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn stage1_text_pretrain(
    model: &mut Model,
    train: &[Entity],
    val: &[Entity],
    cfg: &StageConfig,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<StageOutcome, TrainError> {
    let items = loo_entities(train);
    let text_only = FusionOptions { use_image: false, use_table: false, freeze_gates: true };
    let mask = trainable_mask(&model.store, &model.config().image, 1, None, text_only);
    let eps = cfg.label_smoothing;
    run_stage(
        model,
        1,
        &items,
        cfg,
        mask,
        sink,
        |net, g, ctx, &e, _| entity_loss(net, g, ctx, &train[e], text_only, eps),
        &|m| leave_one_out_validation(m, val, text_only),
    )
}

pub fn stage2_other_pretrain(
    model: &mut Model,
    train: &[Entity],
    val: &[Entity],
    modality: Modality,
    cfg: &StageConfig,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<StageOutcome, TrainError> {
    let items: Vec<ReferencePair> = train
        .iter()
        .enumerate()
        .filter(|(_, e)| has_modality(e, modality))
        .flat_map(|(i, e)| flatten_multireference(i, e))
        .collect();
    if items.is_empty() {
        return Err(TrainError::ModalityAbsent(modality));
    }
    let mask = trainable_mask(&model.store, &model.config().image, 2, Some(modality), FusionOptions::default());
    let eps = cfg.label_smoothing;
    run_stage(
        model,
        2,
        &items,
        cfg,
        mask,
        sink,
        |net, g, ctx, p, _| reference_loss(net, g, ctx, &train[p.entity], p.target, modality, eps),
        &|m| reference_validation(m, val, modality),
    )
}

pub fn stage3_multimodal_train(
    model: &mut Model,
    train: &[Entity],
    val: &[Entity],
    cfg: &StageConfig,
    fusion: FusionOptions,
    sink: &mut dyn FnMut(&StepMetrics),
) -> Result<StageOutcome, TrainError> {
    let items = loo_entities(train);
    let mask = trainable_mask(&model.store, &model.config().image, 3, None, fusion);
    let eps = cfg.label_smoothing;
    run_stage(
        model,
        3,
        &items,
        cfg,
        mask,
        sink,
        |net, g, ctx, &e, _| entity_loss(net, g, ctx, &train[e], fusion, eps),
        &|m| leave_one_out_validation(m, val, fusion),
    )
}
