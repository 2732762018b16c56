use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Dataset, ExperimentConfig, HidingConfig};
use crate::error::{Error, Result};
use crate::hiding::{
    compute_dataset_mean, hide_patches_featuremap, hide_patches_image, hide_segments_sequence,
    pixel_dropout, DropoutMode, HideSpec,
};
use crate::numerics::{
    forward, loss_and_grad, softmax_cross_entropy, ActivationHook, Checkpoint, ModelParams, Sgd,
    Tensor,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Counts every invocation of an input or feature transform, by phase.
#[derive(Debug, Default)]
pub struct TransformAudit {
    train: AtomicU64,
    eval: AtomicU64,
}

impl TransformAudit {
    pub fn record(&self, phase: Phase) {
        match phase {
            Phase::Train => self.train.fetch_add(1, Ordering::Relaxed),
            Phase::Eval => self.eval.fetch_add(1, Ordering::Relaxed),
        };
    }

    pub fn train_calls(&self) -> u64 {
        self.train.load(Ordering::Relaxed)
    }

    pub fn eval_calls(&self) -> u64 {
        self.eval.load(Ordering::Relaxed)
    }
}

/// Per-run constants shared by the train and eval input paths.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPipeline {
    pub hiding: HidingConfig,
    /// Per-channel mean of the training split (raw inputs).
    pub mean: Vec<f64>,
    pub center: bool,
    pub seed: u64,
}

impl InputPipeline {
    pub fn new(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<Self> {
        let train = data.train_inputs();
        let mean = compute_dataset_mean(train.iter().map(|(_, _, t)| *t))?;
        Ok(Self {
            hiding: config.hiding.clone(),
            mean,
            center: config.center_inputs,
            seed,
        })
    }

    fn center(&self, mut x: Tensor) -> Result<Tensor> {
        if self.center {
            let c = x.shape()[0];
            for ch in 0..c {
                let m = self.mean[ch];
                x.channel_mut(ch).iter_mut().for_each(|v| *v -= m);
            }
        }
        Ok(x)
    }

    /// Network input for one sample. Hiding and train-only dropout are
    /// applied only when `phase` is `Train`.
    pub fn prepare(&self, input: &Tensor, id: u64, epoch: u64, phase: Phase, audit: Option<&TransformAudit>) -> Result<Tensor> {
        let note = || {
            if let Some(a) = audit {
                a.record(phase)
            }
        };
        let x = match (&self.hiding, phase) {
            (
                HidingConfig::Image {
                    patch_size,
                    hide_prob,
                    fill,
                    mixed_sizes,
                },
                Phase::Train,
            ) => {
                note();
                let mut spec = HideSpec::new(*patch_size, *hide_prob, fill.resolve(&self.mean), self.hide_seed());
                spec.mixed_sizes = mixed_sizes.clone();
                hide_patches_image(input, &spec, spec.mask_seed(id, epoch))?.0
            }
            (
                HidingConfig::Temporal {
                    segment,
                    hide_prob,
                    fill,
                },
                Phase::Train,
            ) => {
                note();
                let spec = HideSpec::new(*segment, *hide_prob, fill.resolve(&self.mean), self.hide_seed());
                hide_segments_sequence(input, &spec, spec.mask_seed(id, epoch))?.0
            }
            (HidingConfig::Dropout { rate, .. }, Phase::Train) => {
                note();
                let mut r = rng::stream(self.seed, &[rng::tag::DROPOUT, id, epoch]);
                pixel_dropout(input, *rate, &mut r)?
            }
            (
                HidingConfig::Dropout {
                    rate,
                    mode: DropoutMode::TrainAndTest,
                },
                Phase::Eval,
            ) => {
                note();
                let mut r = rng::stream(self.seed, &[rng::tag::DROPOUT, rng::tag::EVAL, id]);
                pixel_dropout(input, *rate, &mut r)?
            }
            _ => input.clone(),
        };
        self.center(x)
    }

    fn hide_seed(&self) -> u64 {
        rng::derive_seed(self.seed, &[rng::tag::HIDE])
    }

    /// Feature-map hiding hook for training, if configured.
    fn feature_hook<'a>(&'a self, id: u64, epoch: u64, audit: Option<&'a TransformAudit>) -> Option<Box<ActivationHook<'a>>> {
        let HidingConfig::FeatureMap {
            layer,
            patch_size,
            hide_prob,
            fill,
        } = &self.hiding
        else {
            return None;
        };
        let (layer, patch, p, fill) = (*layer, *patch_size, *hide_prob, *fill);
        let seed = self.seed;
        Some(Box::new(move |i: usize, act: &mut Tensor| {
            if i != layer {
                return Ok(None);
            }
            if let Some(a) = audit {
                a.record(Phase::Train);
            }
            let mut r = rng::stream(seed, &[rng::tag::FEATURE, id, epoch]);
            let (hidden, mask) = hide_patches_featuremap(act, patch, p, fill, &mut r)?;
            *act = hidden;
            Ok(Some(mask.pixel_mask()))
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub pipeline: InputPipeline,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_loss,val_accuracy\n");
        for e in &self.log {
            s += &format!(
                "{},{},{:.6},{:.6},{:.6}\n",
                e.epoch, e.lr, e.train_loss, e.val_loss, e.val_accuracy
            );
        }
        s
    }
}

/// Clean-input loss and accuracy over a split.
pub fn validation_stats(
    config: &ExperimentConfig,
    params: &ModelParams,
    pipeline: &InputPipeline,
    samples: &[(u64, usize, &Tensor)],
    audit: Option<&TransformAudit>,
) -> Result<(f64, f64)> {
    let per: Vec<(f64, bool)> = samples
        .par_iter()
        .map(|&(id, label, t)| {
            let x = pipeline.prepare(t, id, 0, Phase::Eval, audit)?;
            let pass = forward(&config.network, params, &x)?;
            let (loss, _) = softmax_cross_entropy(&pass.logits, label)?;
            let pred = argmax(&pass.logits);
            Ok((loss, pred == label))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((
        per.iter().map(|p| p.0).sum::<f64>() / n,
        per.iter().filter(|p| p.1).count() as f64 / n,
    ))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains one network for `seed`. Masks are drawn per (sample, epoch) from
/// streams keyed by the seed, and per-sample gradients are summed in a fixed
/// order, so the result does not depend on thread count.
pub fn train(config: &ExperimentConfig, data: &Dataset, seed: u64, audit: Option<&TransformAudit>) -> Result<TrainOutcome> {
    config.validate_against(data)?;
    let pipeline = InputPipeline::new(config, data, seed)?;
    let train_set = data.train_inputs();
    let val_set = data.val_inputs();
    let mut params = ModelParams::init(&config.network, seed)?;
    let mut opt = Sgd::new(config.lr, config.momentum)?;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let last_good = params.clone();
        opt.lr = config.lr_at(epoch);
        let mut r = rng::stream(seed, &[rng::tag::SHUFFLE, epoch as u64]);
        order.sort_unstable();
        order.shuffle(&mut r);
        let mut total_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| {
                    let (id, label, t) = train_set[i];
                    let x = pipeline.prepare(t, id, epoch as u64, Phase::Train, audit)?;
                    let mut hook = pipeline.feature_hook(id, epoch as u64, audit);
                    let (loss, grads, _) = loss_and_grad(&config.network, &params, &x, label, hook.as_deref_mut())?;
                    Ok((loss, grads))
                })
                .collect::<Result<_>>()?;
            let mut grad = params.zeros_like();
            let mut batch_loss = 0.0;
            for (loss, g) in &results {
                batch_loss += loss;
                grad.add_scaled(g, 1.0);
            }
            grad.scale(1.0 / batch.len() as f64);
            if !batch_loss.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            opt.step(&mut params, &grad)?;
            if !params.all_finite() {
                return Err(Error::Diverged {
                    epoch,
                    last_good: Box::new(last_good),
                });
            }
            total_loss += batch_loss;
        }
        let (val_loss, val_accuracy) = validation_stats(config, &params, &pipeline, &val_set, audit)?;
        let entry = EpochLog {
            epoch,
            lr: opt.lr,
            train_loss: total_loss / train_set.len() as f64,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "{} seed {seed} epoch {epoch}: loss {:.4} val loss {:.4} val acc {:.3}",
            config.name,
            entry.train_loss,
            entry.val_loss,
            entry.val_accuracy
        );
        log.push(entry);
    }

    let checkpoint = Checkpoint {
        network: config.network.clone(),
        params,
        seed,
        epoch: config.epochs,
        extra: vec![
            ("config".into(), serde_json::to_string(config)?),
            ("input_mean".into(), serde_json::to_string(&pipeline.mean)?),
        ],
    };
    Ok(TrainOutcome {
        checkpoint,
        pipeline,
        log,
    })
}

/// Rebuilds the input pipeline a checkpoint was trained with.
pub fn pipeline_from_checkpoint(ck: &Checkpoint) -> Result<(ExperimentConfig, InputPipeline)> {
    let config: ExperimentConfig = serde_json::from_str(
        ck.extra("config")
            .ok_or_else(|| Error::format("<checkpoint>", "missing config"))?,
    )?;
    let mean: Vec<f64> = serde_json::from_str(
        ck.extra("input_mean")
            .ok_or_else(|| Error::format("<checkpoint>", "missing input_mean"))?,
    )?;
    if config.network != ck.network {
        return Err(Error::Config(
            "checkpoint network differs from its recorded config".into(),
        ));
    }
    let pipeline = InputPipeline {
        hiding: config.hiding.clone(),
        mean,
        center: config.center_inputs,
        seed: ck.seed,
    };
    Ok((config, pipeline))
}
