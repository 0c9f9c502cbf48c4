//! SGD-with-momentum optimization, reduce-lr-on-plateau scheduling, and
//! the one- and two-stage training pipelines.
//!
//! Everything is deterministic in the configured seed: epoch shuffles,
//! augmentation, dropout, and injection all draw from seeds derived via
//! [`crate::rng::derive_seed`], independent of iteration order.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{pad_and_batch, ItemImage, TagVocabulary, TaggedItem};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::loss::{bce, bce_dice, pretrain_loss, total_loss, LossBreakdown};
use crate::model::{build_model, copy_pretrained, run_model, ModelKind, ModelOutput};
use crate::nn::{Mode, ModelConfig, ParamStore};
use crate::rng::rng_for;
use crate::tad::{tad_augment, TadConfig};
use crate::tensor::autograd::GradientTable;
use crate::tensor::Element;

const SEED_SHUFFLE: u64 = 1;
const SEED_TAD: u64 = 2;
const SEED_INJECT: u64 = 3;
const SEED_DROPOUT: u64 = 4;
const SEED_IMGAUG: u64 = 5;

/// Which pipeline stage a run belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Supervised,
    Pretrain,
    Finetune,
}

/// Objective ablation switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    BceDice,
    Bce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedulerKind {
    None,
    Plateau { factor: f64, patience: usize },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub stage: Stage,
    pub scheduler: SchedulerKind,
    pub tad: Option<TadConfig>,
    /// Dice smoothing constant.
    pub smooth: f64,
    /// Decision threshold for validation metrics.
    pub threshold: f64,
    pub loss: LossKind,
    /// Horizontal flip (p=0.5) and random crop with 12.5% padding.
    pub image_augment: bool,
    /// Stage-1 injection: per item, `k ~ Uniform[1, ceil(ratio * tags)]`
    /// irrelevant tags are added.
    pub pretrain_inject_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-2,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            seed: 1,
            stage: Stage::Supervised,
            scheduler: SchedulerKind::Plateau { factor: 0.1, patience: 5 },
            tad: None,
            smooth: 1.0,
            threshold: 0.5,
            loss: LossKind::BceDice,
            image_augment: false,
            pretrain_inject_ratio: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if let SchedulerKind::Plateau { factor, patience } = self.scheduler {
            if !(0.0..1.0).contains(&factor) || factor == 0.0 || patience == 0 {
                return Err(Error::Config(format!(
                    "plateau scheduler needs factor in (0,1) and patience >= 1, got {factor}/{patience}"
                )));
            }
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) || self.threshold == 0.0 {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if self.smooth <= 0.0 {
            return Err(Error::Config("dice smoothing must be positive".into()));
        }
        if self.pretrain_inject_ratio <= 0.0 {
            return Err(Error::Config("pretrain injection ratio must be positive".into()));
        }
        if let Some(tad) = &self.tad {
            tad.validate()?;
        }
        Ok(())
    }
}

/// One epoch of history. Loss columns are means over training batches
/// weighted by item count; validation columns are empty when no
/// validation split was supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub l_g: f64,
    pub l_it: f64,
    pub l_t: f64,
    pub mean_alpha: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub rows: Vec<EpochRow>,
}

fn opt_cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "epoch,lr,total,l_g,l_it,l_t,mean_alpha,val_precision,val_recall,val_f1\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.epoch,
                r.lr,
                r.total,
                r.l_g,
                r.l_it,
                r.l_t,
                opt_cell(r.mean_alpha),
                opt_cell(r.val_precision),
                opt_cell(r.val_recall),
                opt_cell(r.val_f1),
            ));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Optimizer and scheduler

/// Momentum buffers keyed by parameter name.
pub type Velocity<T> = BTreeMap<String, Vec<T>>;

/// One SGD step: `v <- momentum * v + g; p <- p - lr * v` per
/// parameter. Parameters absent from the gradient table see `g = 0`
/// (their velocity still decays).
pub fn sgd_step<T: Element>(
    store: &mut ParamStore<T>,
    grads: &GradientTable<T>,
    lr: f64,
    momentum: f64,
    velocity: &mut Velocity<T>,
) -> Result<()> {
    let (tlr, tmom) = (T::from_f64(lr), T::from_f64(momentum));
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let param = store.get(&name)?;
        let n = param.len();
        if let Some(entry) = grads.get(&name) {
            if entry.data.len() != n {
                return Err(Error::Parameter(format!(
                    "gradient for `{name}` has {} values, parameter has {n}",
                    entry.data.len()
                )));
            }
        }
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![T::ZERO; n]);
        if v.len() != n {
            return Err(Error::Parameter(format!("velocity for `{name}` has wrong length")));
        }
        let mut data = param.data().to_vec();
        match grads.get(&name) {
            Some(entry) => {
                for i in 0..n {
                    v[i] = tmom * v[i] + entry.data[i];
                    data[i] = data[i] - tlr * v[i];
                }
            }
            None => {
                for i in 0..n {
                    v[i] = tmom * v[i];
                    data[i] = data[i] - tlr * v[i];
                }
            }
        }
        store.set(&name, data)?;
    }
    Ok(())
}

/// Reduce-on-plateau over a higher-is-better metric: after `patience`
/// consecutive epochs without improvement the rate is multiplied by
/// `factor` and the counter resets.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    best: f64,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler { factor, patience, best: f64::NEG_INFINITY, stale: 0 }
    }

    /// Feeds one epoch's metric; returns the (possibly reduced) rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if metric > self.best {
            self.best = metric;
            self.stale = 0;
            lr
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.stale = 0;
                lr * self.factor
            } else {
                lr
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Augmentation helpers

/// Stage-1 relabeling: every original tag becomes "relevant" (1) and
/// `k ~ Uniform[1, ceil(ratio * tags)]` injected vocabulary tags become
/// "irrelevant" (0).
fn inject_relevance(
    item: &TaggedItem,
    ratio: f64,
    vocab: &TagVocabulary,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> TaggedItem {
    let mut out = item.clone();
    for l in &mut out.labels {
        *l = true;
    }
    let upper = ((ratio * item.tags.len() as f64).ceil() as usize).max(1);
    let k = rng.random_range(1..=upper);
    let mut candidates: Vec<u32> =
        vocab.all_ids().filter(|id| !item.tags.contains(id)).collect();
    candidates.shuffle(rng);
    candidates.truncate(k);
    for id in candidates {
        out.tags.push(id);
        out.labels.push(false);
    }
    out
}

/// Horizontal flip with p=0.5, then a random crop after padding each
/// side by 12.5% with zeros.
fn augment_image(item: &mut TaggedItem, rng: &mut rand_chacha::ChaCha8Rng) {
    let ItemImage::Pixels { data, height, width } = &item.image else { return };
    let (h, w) = (*height, *width);
    let mut pixels = data.clone();
    if rng.random::<f64>() < 0.5 {
        for ch in 0..3 {
            for y in 0..h {
                let row = ch * h * w + y * w;
                pixels[row..row + w].reverse();
            }
        }
    }
    let pad = (w / 8).max(1);
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut shifted = vec![0f32; pixels.len()];
    for ch in 0..3 {
        for y in 0..h {
            let sy = y as isize + dy;
            if !(0..h as isize).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if !(0..w as isize).contains(&sx) {
                    continue;
                }
                shifted[ch * h * w + y * w + x] =
                    pixels[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    item.image = ItemImage::Pixels { data: shifted, height: h, width: w };
}

// ---------------------------------------------------------------------------
// Training loop

fn loss_for_output<T: Element>(
    output: &ModelOutput<T>,
    batch: &crate::data::Batch<T>,
    cfg: &TrainConfig,
) -> Result<LossBreakdown<T>> {
    let y = batch.labels_tensor();
    match output {
        ModelOutput::Gated(streams) => match cfg.loss {
            LossKind::BceDice => total_loss(streams, &y, &batch.mask, cfg.smooth),
            LossKind::Bce => {
                let lg = bce(&streams.o_final, &y, &batch.mask)?;
                let lit = bce(&streams.o_it, &y, &batch.mask)?;
                let lt = bce(&streams.o_t, &y, &batch.mask)?;
                let (g, it, t) = (
                    lg.scalar_value()?.to_f64(),
                    lit.scalar_value()?.to_f64(),
                    lt.scalar_value()?.to_f64(),
                );
                Ok(LossBreakdown {
                    total: lg.add(&lit)?.add(&lt)?,
                    l_g: g,
                    l_it: it,
                    l_t: t,
                    bce_g: g,
                    dice_g: 0.0,
                    bce_it: it,
                    dice_it: 0.0,
                    bce_t: t,
                    dice_t: 0.0,
                })
            }
        },
        ModelOutput::Pretrain { o_it, o_t } => pretrain_loss(o_it, o_t, &y, &batch.mask, cfg.smooth),
        ModelOutput::Single(scores) => {
            let total = match cfg.loss {
                LossKind::BceDice => bce_dice(scores, &y, &batch.mask, cfg.smooth)?,
                LossKind::Bce => bce(scores, &y, &batch.mask)?,
            };
            let v = total.scalar_value()?.to_f64();
            Ok(LossBreakdown {
                total,
                l_g: v,
                l_it: 0.0,
                l_t: 0.0,
                bce_g: v,
                dice_g: 0.0,
                bce_it: 0.0,
                dice_it: 0.0,
                bce_t: 0.0,
                dice_t: 0.0,
            })
        }
    }
}

fn masked_alpha_mean<T: Element>(
    output: &ModelOutput<T>,
    batch: &crate::data::Batch<T>,
) -> Option<(f64, usize)> {
    match output {
        ModelOutput::Gated(streams) => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for r in 0..batch.bs {
                for c in 0..batch.l {
                    if batch.mask.get(r, c) {
                        sum += streams.alpha.data()[r * batch.l + c].to_f64();
                        count += 1;
                    }
                }
            }
            Some((sum, count))
        }
        _ => None,
    }
}

/// Trains `kind` on `train_items`, evaluating on `val_items` after each
/// epoch. `initial` continues from an existing store (fine-tuning);
/// otherwise a fresh store is built from `cfg.seed`.
pub fn train(
    kind: ModelKind,
    initial: Option<ParamStore<f32>>,
    train_items: &[TaggedItem],
    val_items: &[TaggedItem],
    vocab: &TagVocabulary,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParamStore<f32>, TrainHistory)> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.vocab_size != vocab.model_vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary ({} tags + pad)",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    if (cfg.stage == Stage::Pretrain) != (kind == ModelKind::MagnetoPretrain) {
        return Err(Error::Config(
            "stage `pretrain` pairs exactly with the gating-free architecture".into(),
        ));
    }
    if train_items.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }

    let mut store = match initial {
        Some(s) => s,
        None => build_model::<f32>(kind, model_cfg, cfg.seed)?,
    };
    let mut velocity: Velocity<f32> = BTreeMap::new();
    let mut lr = cfg.lr;
    let mut scheduler = match cfg.scheduler {
        SchedulerKind::Plateau { factor, patience } => Some(PlateauScheduler::new(factor, patience)),
        SchedulerKind::None => None,
    };
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[SEED_SHUFFLE, e]));

        let mut epoch_items = Vec::with_capacity(order.len());
        for &idx in &order {
            let item = &train_items[idx];
            let mut item = match cfg.stage {
                Stage::Pretrain => inject_relevance(
                    item,
                    cfg.pretrain_inject_ratio,
                    vocab,
                    &mut rng_for(cfg.seed, &[SEED_INJECT, e, idx as u64]),
                ),
                Stage::Supervised | Stage::Finetune => match &cfg.tad {
                    Some(tad) if !tad.is_identity() => tad_augment(
                        item,
                        tad,
                        vocab,
                        &mut rng_for(cfg.seed, &[SEED_TAD, e, idx as u64]),
                    ),
                    _ => item.clone(),
                },
            };
            if cfg.image_augment {
                augment_image(&mut item, &mut rng_for(cfg.seed, &[SEED_IMGAUG, e, idx as u64]));
            }
            epoch_items.push(item);
        }

        let batches =
            pad_and_batch::<f32>(&epoch_items, model_cfg.max_tags, cfg.batch_size, false)?;
        let mut loss_sums = [0.0f64; 4]; // total, l_g, l_it, l_t
        let mut items_seen = 0usize;
        let mut alpha_sum = 0.0;
        let mut alpha_count = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut model_rng = rng_for(cfg.seed, &[SEED_DROPOUT, e, bi as u64]);
            let output = run_model(kind, batch, &store, model_cfg, Mode::Train, &mut model_rng)?;
            let breakdown = loss_for_output(&output, batch, cfg)?;
            let total = breakdown.total_value();
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss diverged at epoch {epoch}, batch {bi}: {total}"
                )));
            }
            let w = batch.bs as f64;
            loss_sums[0] += total * w;
            loss_sums[1] += breakdown.l_g * w;
            loss_sums[2] += breakdown.l_it * w;
            loss_sums[3] += breakdown.l_t * w;
            items_seen += batch.bs;
            if let Some((s, c)) = masked_alpha_mean(&output, batch) {
                alpha_sum += s;
                alpha_count += c;
            }
            let grads = breakdown.total.backward()?;
            sgd_step(&mut store, &grads, lr, cfg.momentum, &mut velocity)?;
        }

        let val = if val_items.is_empty() {
            None
        } else {
            Some(evaluate_model(
                kind,
                &store,
                val_items,
                model_cfg,
                cfg.threshold,
                cfg.batch_size,
            )?)
        };
        if let (Some(sched), Some(metrics)) = (scheduler.as_mut(), val.as_ref()) {
            lr = sched.observe(metrics.micro_f1, lr);
        }

        let n = items_seen as f64;
        history.rows.push(EpochRow {
            epoch,
            lr,
            total: loss_sums[0] / n,
            l_g: loss_sums[1] / n,
            l_it: loss_sums[2] / n,
            l_t: loss_sums[3] / n,
            mean_alpha: if alpha_count > 0 { Some(alpha_sum / alpha_count as f64) } else { None },
            val_precision: val.as_ref().map(|m| m.micro_precision),
            val_recall: val.as_ref().map(|m| m.micro_recall),
            val_f1: val.as_ref().map(|m| m.micro_f1),
        });
    }
    Ok((store, history))
}

/// Two-stage pipeline: unsupervised pre-training of the gating-free
/// model on `unlabeled` (labels ignored; injected tags are the
/// negatives), then supervised fine-tuning of the gated model with the
/// shared blocks copied over and everything trainable.
pub fn pretrain_then_finetune(
    unlabeled: &[TaggedItem],
    train_labeled: &[TaggedItem],
    val_items: &[TaggedItem],
    vocab: &TagVocabulary,
    model_cfg: &ModelConfig,
    cfg_pre: &TrainConfig,
    cfg_ft: &TrainConfig,
) -> Result<(ParamStore<f32>, TrainHistory, TrainHistory)> {
    if cfg_pre.stage != Stage::Pretrain {
        return Err(Error::Config("stage-1 config must have stage `pretrain`".into()));
    }
    if cfg_ft.stage != Stage::Finetune {
        return Err(Error::Config("stage-2 config must have stage `finetune`".into()));
    }
    let (pre_store, pre_history) = train(
        ModelKind::MagnetoPretrain,
        None,
        unlabeled,
        &[],
        vocab,
        model_cfg,
        cfg_pre,
    )?;
    let fresh = build_model::<f32>(ModelKind::Magneto, model_cfg, cfg_ft.seed)?;
    let merged = copy_pretrained(&pre_store, &fresh)?;
    let (store, ft_history) = train(
        ModelKind::Magneto,
        Some(merged),
        train_labeled,
        val_items,
        vocab,
        model_cfg,
        cfg_ft,
    )?;
    Ok((store, pre_history, ft_history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, SyntheticConfig};
    use crate::nn::Backbone;
    use crate::tensor::Tensor;

    #[test]
    fn sgd_momentum_matches_hand_recurrence() {
        // momentum=0.9, lr=0.1, g=1 twice from p=0: p=-0.1 then p=-0.29.
        let mut store = ParamStore::<f64>::new();
        store.insert("p", vec![0.0], &[1]).unwrap();
        let mut velocity = Velocity::new();
        let grad_of_one = |store: &ParamStore<f64>| {
            let x = Tensor::new(vec![1.0], &[1]).unwrap();
            store.get("p").unwrap().mul(&x).unwrap().reduce_sum(None).unwrap().backward().unwrap()
        };
        let g = grad_of_one(&store);
        sgd_step(&mut store, &g, 0.1, 0.9, &mut velocity).unwrap();
        assert!((store.get("p").unwrap().data()[0] - (-0.1)).abs() < 1e-12);
        let g = grad_of_one(&store);
        sgd_step(&mut store, &g, 0.1, 0.9, &mut velocity).unwrap();
        assert!((store.get("p").unwrap().data()[0] - (-0.29)).abs() < 1e-12);
    }

    #[test]
    fn sgd_without_momentum_is_vanilla() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", vec![2.0], &[1]).unwrap();
        let x = Tensor::new(vec![3.0], &[1]).unwrap();
        let grads =
            store.get("p").unwrap().mul(&x).unwrap().reduce_sum(None).unwrap().backward().unwrap();
        let mut velocity = Velocity::new();
        sgd_step(&mut store, &grads, 0.5, 0.0, &mut velocity).unwrap();
        assert_eq!(store.get("p").unwrap().data()[0], 2.0 - 0.5 * 3.0);
    }

    #[test]
    fn zero_gradient_and_zero_velocity_leave_parameters_unchanged() {
        let mut store = ParamStore::<f64>::new();
        store.insert("p", vec![1.5, -2.5], &[2]).unwrap();
        let mut velocity = Velocity::new();
        // Empty table: every parameter sees g = 0.
        let empty = Tensor::new(vec![1.0], &[1]).unwrap().sigmoid().unwrap().backward().unwrap();
        sgd_step(&mut store, &empty, 0.1, 0.9, &mut velocity).unwrap();
        assert_eq!(store.get("p").unwrap().data(), &[1.5, -2.5]);
    }

    #[test]
    fn plateau_scheduler_follows_the_reduction_rule() {
        let mut s = PlateauScheduler::new(0.1, 5);
        let mut lr = 1e-2;
        // Strictly improving: constant.
        for i in 0..10 {
            lr = s.observe(i as f64, lr);
        }
        assert_eq!(lr, 1e-2);
        // Six consecutive non-improving epochs: one reduction.
        for _ in 0..5 {
            lr = s.observe(0.0, lr);
            assert_eq!(lr, 1e-2);
        }
        lr = s.observe(0.0, lr);
        assert!((lr - 1e-3).abs() < 1e-15);
        // A second full plateau: another factor of 0.1.
        for _ in 0..6 {
            lr = s.observe(0.0, lr);
        }
        assert!((lr - 1e-4).abs() < 1e-16);
    }

    fn tiny_setup(seed: u64) -> (Vec<TaggedItem>, TagVocabulary, ModelConfig) {
        let synth = SyntheticConfig {
            vocab_size: 12,
            items: 8,
            grid_side: 2,
            patterns_per_image: (1, 2),
            distractors_per_item: (1, 2),
            threshold: 1,
            seed,
        };
        let (items, vocab) = generate_synthetic(&synth).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            depth_image: 1,
            depth_tag: 1,
            d_ff: 16,
            dropout: 0.0,
            max_tags: 4,
            grid_size: 2,
            vocab_size: vocab.model_vocab_size(),
            backbone: Backbone::TinyConv,
        };
        (items, vocab, cfg)
    }

    #[test]
    fn one_epoch_updates_every_parameter_with_nonzero_gradient() {
        let (items, vocab, model_cfg) = tiny_setup(50);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.1,
            scheduler: SchedulerKind::None,
            ..Default::default()
        };
        let before = build_model::<f32>(ModelKind::Magneto, &model_cfg, cfg.seed).unwrap();
        let (after, history) =
            train(ModelKind::Magneto, None, &items, &[], &vocab, &model_cfg, &cfg).unwrap();
        assert_eq!(history.rows.len(), 1);
        let mut changed = 0usize;
        for (name, t) in after.iter() {
            if t.data() != before.get(name).unwrap().data() {
                changed += 1;
            }
        }
        // Everything except the pinned embedding pad row should move;
        // allow untouched embedding rows for tags absent from the batch.
        assert!(changed >= after.len() - 1, "only {changed} of {} tensors changed", after.len());
    }

    #[test]
    fn training_is_bitwise_deterministic_in_the_seed() {
        let (items, vocab, model_cfg) = tiny_setup(51);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            tad: Some(TadConfig { beta: 0.5, beta_hat: 0.5 }),
            ..Default::default()
        };
        let (s1, h1) =
            train(ModelKind::Magneto, None, &items[..6], &items[6..], &vocab, &model_cfg, &cfg)
                .unwrap();
        let (s2, h2) =
            train(ModelKind::Magneto, None, &items[..6], &items[6..], &vocab, &model_cfg, &cfg)
                .unwrap();
        assert_eq!(h1.to_csv(), h2.to_csv());
        for (name, t) in s1.iter() {
            assert_eq!(t.data(), s2.get(name).unwrap().data(), "{name}");
        }
        let cfg3 = TrainConfig { seed: 99, ..cfg };
        let (_, h3) =
            train(ModelKind::Magneto, None, &items[..6], &items[6..], &vocab, &model_cfg, &cfg3)
                .unwrap();
        assert_ne!(h1.to_csv(), h3.to_csv());
    }

    #[test]
    fn repeated_batch_overfit_loss_decreases() {
        let (items, vocab, model_cfg) = tiny_setup(52);
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            scheduler: SchedulerKind::None,
            ..Default::default()
        };
        let (_, history) =
            train(ModelKind::Magneto, None, &items, &[], &vocab, &model_cfg, &cfg).unwrap();
        let first = history.rows.first().unwrap().total;
        let last = history.rows.last().unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        for w in history.rows.windows(2) {
            assert!(
                w[1].total <= w[0].total * 1.02,
                "loss spiked at epoch {}: {} -> {}",
                w[1].epoch,
                w[0].total,
                w[1].total
            );
        }
        // History row identity: total = l_g + l_it + l_t.
        for r in &history.rows {
            assert!((r.total - (r.l_g + r.l_it + r.l_t)).abs() < 1e-6);
            let a = r.mean_alpha.unwrap();
            assert!(a > 0.0 && a < 1.0);
        }
    }

    #[test]
    fn pretrain_pipeline_copies_blocks_bit_exactly_at_stage_two_start() {
        let (items, vocab, model_cfg) = tiny_setup(53);
        let cfg_pre = TrainConfig {
            epochs: 1,
            batch_size: 4,
            stage: Stage::Pretrain,
            scheduler: SchedulerKind::None,
            ..Default::default()
        };
        // Zero-epoch stage 2 is invalid; run one epoch and instead verify
        // the copy contract through the stage-1 store.
        let (pre_store, pre_hist) = train(
            ModelKind::MagnetoPretrain,
            None,
            &items[..6],
            &[],
            &vocab,
            &model_cfg,
            &cfg_pre,
        )
        .unwrap();
        assert_eq!(pre_hist.rows.len(), 1);
        assert!(pre_hist.rows[0].l_g == 0.0);
        let fresh = build_model::<f32>(ModelKind::Magneto, &model_cfg, 123).unwrap();
        let merged = copy_pretrained(&pre_store, &fresh).unwrap();
        for (name, t) in pre_store.iter() {
            if crate::model::PRETRAINED_PREFIXES.iter().any(|p| name.starts_with(p)) {
                assert_eq!(t.data(), merged.get(name).unwrap().data(), "{name}");
            }
        }
    }
}
