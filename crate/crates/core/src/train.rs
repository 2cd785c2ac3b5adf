//! Mini-batch AdamW training of a [`PeneoModel`] with best-by-validation
//! model selection.

use serde::{Deserialize, Serialize};

use crate::decoder::LossConfig;
use crate::encoder::FeatureStore;
use crate::error::{Error, Result};
use crate::evalkit::{pair_f1, pairs_as_strings, PairF1Report};
use crate::model::{PeneoModel, Sample};
use crate::numerics::optim::clip_grad_norm;
use crate::numerics::{adamw_step, OptimizerConfig, ParamSlot, Params, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub encoder_lr: f64,
    pub decoder_lr: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    /// Probability of replacing a training token id by UNK.
    pub word_dropout: f64,
    /// Maximum random page translation per axis, in normalised units.
    pub layout_shift: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            encoder_lr: 1e-3,
            decoder_lr: 1e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.1,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            word_dropout: 0.1,
            layout_shift: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rates and epoch count used for full-size fine-tuning.
    pub fn paper_preset() -> Self {
        Self { epochs: 650, encoder_lr: 2e-6, decoder_lr: 1e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train: epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config("train: word_dropout must be in [0, 1)".into()));
        }
        if !(0.0..=0.5).contains(&self.layout_shift) {
            return Err(Error::Config("train: layout_shift must be in [0, 0.5]".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("train: clip_norm must be positive".into()));
            }
        }
        self.loss.validate()?;
        self.optimizer(self.encoder_lr, 1).validate()?;
        self.optimizer(self.decoder_lr, 1).validate()
    }

    fn optimizer(&self, lr: f64, total_steps: u64) -> OptimizerConfig {
        OptimizerConfig {
            learning_rate: lr,
            weight_decay: self.weight_decay,
            warmup_ratio: self.warmup_ratio,
            total_steps,
            ..OptimizerConfig::default()
        }
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M = PeneoModel<f32>> {
    /// Parameters of the best validation epoch (the last epoch when no
    /// validation set is given).
    pub model: M,
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub log: Vec<EpochLog>,
}

/// A model the generic loop can train: two parameter groups, one with the
/// encoder learning rate and one with the head learning rate.
pub trait Trainable: Params<f32> + Clone {
    fn param_groups(&mut self) -> (Vec<&mut ParamSlot<f32>>, Vec<&mut ParamSlot<f32>>);
}

impl Trainable for PeneoModel<f32> {
    fn param_groups(&mut self) -> (Vec<&mut ParamSlot<f32>>, Vec<&mut ParamSlot<f32>>) {
        self.slot_groups_mut()
    }
}

/// Micro-averaged pair F1 of `model` over `samples`.
pub fn evaluate_pairs(model: &PeneoModel<f32>, samples: &[Sample], store: Option<&FeatureStore>) -> Result<PairF1Report> {
    let mut total = PairF1Report::from_counts(0, 0, 0);
    for s in samples {
        let pred = pairs_as_strings(&model.parse(s, store)?);
        total = total.merge(&pair_f1(&pred, &s.gold_pairs));
    }
    Ok(total)
}

/// One optimiser step on a batch: gradients are averaged over the batch's
/// documents, summed in batch order. `accumulate` returns one document's loss.
pub fn train_step<M: Trainable, S>(
    model: &mut M,
    batch: &[&S],
    cfg: &TrainConfig,
    enc_opt: &OptimizerConfig,
    dec_opt: &OptimizerConfig,
    rng: &mut SplitMix64,
    accumulate: &mut impl FnMut(&mut M, &S, &mut SplitMix64) -> Result<f64>,
) -> Result<f64> {
    model.zero_grads();
    let mut loss = 0.0;
    for s in batch {
        loss += accumulate(model, s, rng)?;
    }
    let inv = 1.0 / batch.len().max(1) as f32;
    for slot in model.slots_mut() {
        slot.grad.data_mut().iter_mut().for_each(|g| *g *= inv);
    }
    if let Some(c) = cfg.clip_norm {
        clip_grad_norm(&mut model.slots_mut(), c);
    }
    let (mut enc, mut dec) = model.param_groups();
    adamw_step(&mut enc, enc_opt);
    adamw_step(&mut dec, dec_opt);
    Ok(loss / batch.len().max(1) as f64)
}

/// Shuffled mini-batch training with per-epoch validation. `validate`
/// returns `None` when there is nothing to validate on; the best-scoring
/// epoch's parameters are returned (ties keep the earlier epoch).
pub fn fit<M: Trainable, S>(
    mut model: M,
    train_set: &[&S],
    cfg: &TrainConfig,
    mut accumulate: impl FnMut(&mut M, &S, &mut SplitMix64) -> Result<f64>,
    mut validate: impl FnMut(&M) -> Result<Option<f64>>,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let total_steps = (cfg.epochs * cfg.steps_per_epoch(train_set.len())) as u64;
    let enc_opt = cfg.optimizer(cfg.encoder_lr, total_steps);
    let dec_opt = cfg.optimizer(cfg.decoder_lr, total_steps);
    let mut rng = SplitMix64::new(cfg.seed).fork(0x7472_6169_6e);
    let mut aug_rng = SplitMix64::new(cfg.seed).fork(0x6175_67);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, M)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&S> = chunk.iter().map(|&i| train_set[i]).collect();
            sum += train_step(&mut model, &batch, cfg, &enc_opt, &dec_opt, &mut aug_rng, &mut accumulate)?;
            steps += 1;
        }
        let mean_loss = sum / steps as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: loss is {mean_loss}")));
        }
        let val_f1 = validate(&model)?;
        log::info!("epoch {epoch}: loss {mean_loss:.5} val_f1 {val_f1:?}");
        log.push(EpochLog { epoch, mean_loss, val_f1 });
        if let Some(f1) = val_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.clone()));
            }
        }
    }
    Ok(match best {
        Some((f1, epoch, m)) => TrainOutcome { model: m, best_epoch: epoch, best_val_f1: Some(f1), log },
        None => TrainOutcome { model, best_epoch: cfg.epochs, best_val_f1: None, log },
    })
}

/// Trains the joint extractor; empty documents are skipped.
pub fn train(
    model: PeneoModel<f32>,
    train_set: &[Sample],
    val_set: &[Sample],
    store: Option<&FeatureStore>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let usable: Vec<&Sample> = train_set.iter().filter(|s| s.tok.n() > 0).collect();
    let augment = cfg.word_dropout > 0.0 || cfg.layout_shift > 0.0;
    fit(
        model,
        &usable,
        cfg,
        |m, s, rng| {
            Ok(match m.cfg.encoder.clone() {
                Some(ec) if augment => {
                    let input = s.input.augmented(&ec, cfg.word_dropout, cfg.layout_shift, rng);
                    m.accumulate_with(s, &input, store, &cfg.loss)?.total
                }
                _ => m.accumulate(s, store, &cfg.loss)?.total,
            })
        },
        |m| {
            if val_set.is_empty() {
                Ok(None)
            } else {
                Ok(Some(evaluate_pairs(m, val_set, store)?.f1))
            }
        },
    )
}
