//! Train-then-evaluate runs on in-memory synthetic data, shared by the
//! command-line runner and the ablation checks.

use crate::config::RunConfig;
use crate::detection::Detection;
use crate::froc::{evaluate, group_by_image, Annotation, FrocReport};
use crate::model::{detect_all, train, Detector, LossRecord, TrainSample, TrainSettings};
use crate::synth::{generate_split, normalize_stack, Split};
use crate::tensor::FeatureMap;
use crate::Result;

/// Normalises a raw `[0, 1]` stack and attaches its boxes.
pub fn prepare_sample(image_id: &str, raw: &FeatureMap<f32>, annotations: &[Annotation]) -> TrainSample<f32> {
    TrainSample {
        image_id: image_id.to_string(),
        image: normalize_stack(raw),
        boxes: annotations.iter().map(|a| a.bbox).collect(),
    }
}

/// A split prepared for training or evaluation.
#[derive(Clone, Debug)]
pub struct PreparedSplit {
    pub samples: Vec<TrainSample<f32>>,
    pub annotations: Vec<Annotation>,
}

impl PreparedSplit {
    pub fn image_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.image_id.clone()).collect()
    }
}

pub fn synthesize_split(cfg: &RunConfig, split: Split) -> Result<PreparedSplit> {
    let phantoms = generate_split(&cfg.data.phantom, &cfg.data.counts, split)?;
    let mut samples = Vec::with_capacity(phantoms.len());
    let mut annotations = Vec::new();
    for (id, p) in &phantoms {
        samples.push(prepare_sample(id, &p.stack, &p.annotations));
        annotations.extend(p.annotations.iter().cloned());
    }
    Ok(PreparedSplit { samples, annotations })
}

pub fn train_settings(cfg: &RunConfig) -> TrainSettings {
    TrainSettings {
        optimizer: cfg.optimizer.clone(),
        assignment: cfg.assignment,
        loss: cfg.loss,
        seed: cfg.seed,
    }
}

/// Detector trained from `(cfg.model, cfg.seed)` on `train_split`.
pub fn train_detector(
    cfg: &RunConfig,
    train_split: &PreparedSplit,
    on_iteration: impl FnMut(&LossRecord),
) -> Result<(Detector<f32>, Vec<LossRecord>)> {
    cfg.validate()?;
    let mut det = Detector::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let log = train(&mut det, &train_split.samples, &train_settings(cfg), on_iteration)?;
    Ok((det, log))
}

pub fn evaluate_detector(
    cfg: &RunConfig,
    det: &Detector<f32>,
    split: &PreparedSplit,
) -> Result<(Vec<Detection>, FrocReport)> {
    let dets = detect_all(det, &split.samples, &cfg.inference)?;
    let images = group_by_image(&split.image_ids(), &dets, &split.annotations);
    let report = evaluate(&images, &cfg.eval.options()?)?;
    Ok((dets, report))
}
