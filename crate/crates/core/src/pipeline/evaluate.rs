use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{Dataset, ExperimentConfig};
use super::train::{argmax, pipeline_from_checkpoint, InputPipeline, Phase, TrainOutcome, TransformAudit};
use crate::cam::{compute_cam, ensemble_cams, extract_temporal_segments, localize_bbox, Cam};
use crate::error::{Error, Result};
use crate::eval::{
    image_metrics, temporal_map, ImageRecord, ImageReport, IouCriterion, TemporalRecord, TemporalReport,
};
use crate::numerics::{forward, Checkpoint, ConvNetConfig, ModelParams, Tensor};

/// A network ready for inference together with the input pipeline it was
/// trained with.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub network: ConvNetConfig,
    pub params: ModelParams,
    pub pipeline: InputPipeline,
}

impl TrainedModel {
    pub fn from_outcome(o: &TrainOutcome) -> Self {
        Self {
            network: o.checkpoint.network.clone(),
            params: o.checkpoint.params.clone(),
            pipeline: o.pipeline.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, ExperimentConfig)> {
        ck.params.check_against(&ck.network)?;
        let (config, pipeline) = pipeline_from_checkpoint(ck)?;
        Ok((
            Self {
                network: ck.network.clone(),
                params: ck.params.clone(),
                pipeline,
            },
            config,
        ))
    }

    fn check_compatible(&self, data: &Dataset) -> Result<()> {
        if self.network.in_channels != data.channels() || self.network.num_classes != data.num_classes() {
            return Err(Error::Config(format!(
                "checkpoint expects {} channels / {} classes, dataset has {} / {}",
                self.network.in_channels,
                self.network.num_classes,
                data.channels(),
                data.num_classes()
            )));
        }
        if self.pipeline.mean.len() != data.channels() {
            return Err(Error::Config("checkpoint input mean has the wrong length".into()));
        }
        Ok(())
    }
}

/// Full-input inference of one sample through one or more models.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Mean class probabilities over the models.
    pub probs: Vec<f64>,
    features: Vec<Tensor>,
    input_id: u64,
    extent: (usize, usize),
}

impl Prediction {
    pub fn top_class(&self) -> usize {
        argmax(&self.probs)
    }

    /// Mean CAM of `class` over the models, scaled to the input extent.
    pub fn cam(&self, models: &[TrainedModel], class: usize) -> Result<Cam> {
        let cams = models
            .iter()
            .zip(&self.features)
            .map(|(m, f)| {
                Ok(compute_cam(f, m.params.classifier_row(class), class, self.input_id)?
                    .with_input_extent(self.extent.0, self.extent.1))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ensemble_cams(&cams, &[])?.0)
    }
}

pub fn predict(models: &[TrainedModel], input: &Tensor, id: u64, audit: Option<&TransformAudit>) -> Result<Prediction> {
    if models.is_empty() {
        return Err(Error::Empty("no model to evaluate".into()));
    }
    let extent = match *input.shape() {
        [_, h, w] => (h, w),
        _ => return Err(Error::Shape(format!("expected CxHxW input, got {:?}", input.shape()))),
    };
    let mut features = Vec::with_capacity(models.len());
    let mut probs = Vec::with_capacity(models.len());
    for m in models {
        let x = m.pipeline.prepare(input, id, 0, Phase::Eval, audit)?;
        let pass = forward(&m.network, &m.params, &x)?;
        probs.push(pass.probabilities());
        features.push(pass.features().clone());
    }
    let k = probs.len() as f64;
    let fused = (0..probs[0].len())
        .map(|i| probs.iter().map(|p| p[i]).sum::<f64>() / k)
        .collect();
    Ok(Prediction {
        probs: fused,
        features,
        input_id: id,
        extent,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum Evaluation {
    Image {
        records: Vec<ImageRecord>,
        report: ImageReport,
    },
    Temporal {
        records: Vec<TemporalRecord>,
        report: TemporalReport,
    },
}

impl Evaluation {
    pub fn image_report(&self) -> Option<&ImageReport> {
        match self {
            Evaluation::Image { report, .. } => Some(report),
            _ => None,
        }
    }

    pub fn temporal_report(&self) -> Option<&TemporalReport> {
        match self {
            Evaluation::Temporal { report, .. } => Some(report),
            _ => None,
        }
    }
}

/// Evaluation settings taken from the experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub cam_threshold: f64,
    pub thresholds: Vec<f64>,
    pub criterion: IouCriterion,
}

impl EvalSettings {
    pub fn from_config(config: &ExperimentConfig, data: &Dataset) -> Self {
        Self {
            cam_threshold: config.cam_threshold_for(data.task()),
            thresholds: config.thresholds.clone(),
            criterion: config.temporal_iou,
        }
    }
}

/// Scores the validation split on full, unhidden inputs. Several models are
/// ensembled by averaging their CAMs and class probabilities.
pub fn evaluate(models: &[TrainedModel], data: &Dataset, settings: &EvalSettings, audit: Option<&TransformAudit>) -> Result<Evaluation> {
    if models.is_empty() {
        return Err(Error::Empty("no model to evaluate".into()));
    }
    for m in models {
        m.check_compatible(data)?;
    }
    let thr = settings.cam_threshold;
    match data {
        Dataset::Images(d) => {
            let records = d
                .val
                .par_iter()
                .map(|s| {
                    let p = predict(models, &s.image, s.id, audit)?;
                    let gt_box = localize_bbox(&p.cam(models, s.label)?, thr)?;
                    let pred = p.top_class();
                    let top1_box = if pred == s.label {
                        gt_box
                    } else {
                        localize_bbox(&p.cam(models, pred)?, thr)?
                    };
                    Ok(ImageRecord {
                        input_id: s.id,
                        true_class: s.label,
                        probabilities: p.probs,
                        gt_class_box: gt_box,
                        top1_box,
                        gt_boxes: s.gt_boxes.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = image_metrics(&records)?;
            Ok(Evaluation::Image { records, report })
        }
        Dataset::Sequences(d) => {
            let records = d
                .val
                .par_iter()
                .map(|s| {
                    let p = predict(models, &s.features, s.id, audit)?;
                    let cam = p.cam(models, s.label)?;
                    Ok(TemporalRecord {
                        video_id: s.id,
                        class: s.label,
                        predictions: extract_temporal_segments(&cam, thr)?,
                        ground_truth: s.instances.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = temporal_map(&records, &settings.thresholds, settings.criterion)?;
            Ok(Evaluation::Temporal { records, report })
        }
    }
}
