//! Mini-batch AdamW training with best-validation-IoU model selection.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment, BitemporalSample, Dataset};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::metrics::{Confusion, Scores};
use crate::model::{InferMode, Model, Pass};
use crate::rng::keyed_rng;
use crate::tensor::{AdamW, ElementwiseKind, Graph};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-sample training loss over the epoch.
    pub train_loss: f64,
    pub val: Scores,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation IoU.
    pub model: Model,
    pub optimizer: AdamW,
    pub best_epoch: usize,
    pub best_val_iou: f64,
    pub log: Vec<EpochLog>,
    pub steps: u64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Evaluation {
    pub confusion: Confusion,
    pub scores: Scores,
    /// Forward MACs of one sample.
    pub macs: u64,
}

/// Micro-averaged scores of `model` over `samples` with deterministic masks.
pub fn evaluate(model: &Model, samples: &[BitemporalSample], mode: InferMode) -> Result<Evaluation> {
    let mut confusion = Confusion::default();
    let mut macs = 0;
    for s in samples {
        let (pred, m) = model.infer(&s.image_a, &s.image_b, mode, 0.5)?;
        confusion += Confusion::from_maps(&pred, &s.mask)?;
        macs = m;
    }
    Ok(Evaluation {
        confusion,
        scores: confusion.scores(),
        macs,
    })
}

pub fn train(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome> {
    train_with(cfg, data, |_| {})
}

/// Trains from scratch, calling `on_epoch` after each validation pass.
pub fn train_with(
    cfg: &ExperimentConfig,
    data: &Dataset,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training needs non-empty train and val splits".into()));
    }
    let start = Instant::now();
    let mut model = Model::new(cfg.arch.clone(), cfg.seed)?;
    let mut opt = AdamW::new(cfg.optim)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut best: Option<(f64, usize, Model)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut keyed_rng(&[cfg.seed, epoch as u64, 0x5F]));
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let owned;
                let s = if cfg.augment {
                    owned = augment(&data.train[i], cfg.seed, (epoch * data.train.len() + i) as u64);
                    &owned
                } else {
                    &data.train[i]
                };
                let mut g = Graph::new();
                let out = model.forward(&mut g, &s.image_a, &s.image_b, Pass::train(step))?;
                let loss = model.loss(&mut g, &out, &s.mask)?;
                let value = g.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        step,
                        lr: cfg.optim.lr,
                        grad_norm: model.params().grad_norm(),
                    });
                }
                loss_sum += value;
                let scaled = g.elementwise(ElementwiseKind::Mul, loss, scale)?;
                g.backward_into(scaled, model.params_mut())?;
            }
            let grad_norm = model.params().grad_norm();
            if !grad_norm.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    lr: cfg.optim.lr,
                    grad_norm,
                });
            }
            opt.step(model.params_mut())?;
            model.params_mut().zero_grad();
            step += 1;
        }
        let val = evaluate(&model, &data.val, InferMode::Siamese)?.scores;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / data.train.len() as f64,
            val,
            wall_s: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(iou, _, _)| val.iou > *iou) {
            best = Some((val.iou, epoch, model.clone()));
        }
    }
    let (best_val_iou, best_epoch, best_model) = best.expect("at least one epoch");
    Ok(TrainOutcome {
        model: best_model,
        optimizer: opt,
        best_epoch,
        best_val_iou,
        log,
        steps: step,
        wall_s: start.elapsed().as_secs_f64(),
    })
}
