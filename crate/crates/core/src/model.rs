//! The assembled detector: pyramid, optional per-level boosters and the
//! shared head, with momentum SGD and a deterministic training loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_parameters, save_parameters};
use crate::config::{InferenceConfig, ModelConfig, OptimizerConfig};
use crate::detection::{
    assign_targets, decode_box, detection_loss, generate_anchors, head_backward, head_forward,
    nms, sample_anchors, Assignment, AssignmentConfig, BoundingBox, BoxDeltas, Detection,
    DetectionLoss, HeadCache, HeadOutput, HeadParams, LossConfig,
};
use crate::fpn::{fpn_backward, fpn_backward_from_down, fpn_forward, FpnCache, FpnParams};
use crate::msb::{msb_backward, msb_forward_with_cache, MsbCache, MsbInput, MsbParams};
use crate::params::{join, Parameters};
use crate::tensor::{sigmoid_scalar, FeatureMap};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Detector<T> {
    pub config: ModelConfig,
    pub fpn: FpnParams<T>,
    /// One booster per pyramid level; empty for plain FPN.
    pub boosters: Vec<MsbParams<T>>,
    pub head: HeadParams<T>,
}

/// Retained state of [`Detector::forward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    fpn: FpnCache<T>,
    pub(crate) msb: Vec<MsbCache<T>>,
    head: HeadCache<T>,
}

impl<T: Scalar> Detector<T> {
    /// Randomly initialised detector; a pure function of `(config, seed)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fpn = FpnParams::init(&config.backbone, &mut rng)?;
        let boosters = match config.booster() {
            Some(m) => (0..config.backbone.num_levels)
                .map(|_| MsbParams::init(config.backbone.pyramid_channels, &m, &mut rng))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let head = HeadParams::init(
            config.head_in_channels(),
            config.anchors.anchors_per_cell(),
            &config.head,
            &mut rng,
        )?;
        Ok(Self {
            config,
            fpn,
            boosters,
            head,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            fpn: self.fpn.zeros_like(),
            boosters: self.boosters.iter().map(MsbParams::zeros_like).collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Every anchor of an input of the given size, in head output order.
    pub fn anchors(&self, height: usize, width: usize) -> Result<Vec<BoundingBox>> {
        let strides = self.config.backbone.level_strides();
        let shapes: Vec<_> = strides.iter().map(|s| (height / s, width / s)).collect();
        Ok(generate_anchors(&self.config.anchors, &shapes, &strides)?
            .into_iter()
            .flatten()
            .collect())
    }

    pub fn forward(&self, image: &FeatureMap<T>) -> Result<(HeadOutput<T>, ForwardCache<T>)> {
        let (outs, fpn) = fpn_forward(image, &self.fpn, &self.config.backbone)?;
        let mut msb = Vec::new();
        let levels = match self.config.booster() {
            None => outs,
            Some(m) => {
                let mut boosted = Vec::with_capacity(outs.len());
                for (i, p) in self.boosters.iter().enumerate() {
                    let input = match m.input {
                        MsbInput::Fused => &outs[i],
                        MsbInput::Down => &fpn.pyramid.levels[i].down,
                    };
                    let (out, cache) = msb_forward_with_cache(input, p, &m)?;
                    boosted.push(out);
                    msb.push(cache);
                }
                boosted
            }
        };
        let (out, head) = head_forward(&levels, &self.head)?;
        Ok((out, ForwardCache { fpn, msb, head }))
    }

    /// Parameter gradients given `dL/d head outputs`.
    pub fn backward(&self, cache: &ForwardCache<T>, grad: &HeadOutput<T>) -> Result<Self> {
        let mut g = self.zeros_like();
        let grad_levels = head_backward(&self.head, &cache.head, grad, &mut g.head)?;
        match self.config.booster() {
            None => fpn_backward(&self.fpn, &cache.fpn, &grad_levels, &mut g.fpn)?,
            Some(m) => {
                let mut grad_in = Vec::with_capacity(grad_levels.len());
                for (i, gl) in grad_levels.iter().enumerate() {
                    grad_in.push(msb_backward(&self.boosters[i], &m, &cache.msb[i], gl, &mut g.boosters[i])?);
                }
                match m.input {
                    MsbInput::Fused => fpn_backward(&self.fpn, &cache.fpn, &grad_in, &mut g.fpn)?,
                    MsbInput::Down => fpn_backward_from_down(&self.fpn, &cache.fpn, &grad_in, &mut g.fpn)?,
                }
            }
        }
        Ok(g)
    }

    /// Loss of a single image (batch of one) and its parameter gradients.
    pub fn loss_and_gradient(
        &self,
        image: &FeatureMap<T>,
        assignments: &[Assignment],
        sampled: &[bool],
        cfg: &LossConfig,
    ) -> Result<(DetectionLoss<T>, Self)> {
        if image.batch() != 1 {
            return Err(Error::shape(format!("expected one image, got a batch of {}", image.batch())));
        }
        let (out, cache) = self.forward(image)?;
        let loss = detection_loss(&out.flat_logits(0), &out.flat_deltas(0), assignments, sampled, cfg)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {}", loss.total)));
        }
        let mut grad = out.zeros_like();
        out.unflatten_into(0, &loss.grad_logits, &loss.grad_deltas, &mut grad)?;
        let grads = self.backward(&cache, &grad)?;
        Ok((loss, grads))
    }

    /// Loss value only; used by the finite-difference checks.
    pub fn loss(
        &self,
        image: &FeatureMap<T>,
        assignments: &[Assignment],
        sampled: &[bool],
        cfg: &LossConfig,
    ) -> Result<T> {
        let (out, _) = self.forward(image)?;
        Ok(detection_loss(&out.flat_logits(0), &out.flat_deltas(0), assignments, sampled, cfg)?.total)
    }

    /// Scored, decoded, clipped and suppressed boxes for one image.
    pub fn detect(
        &self,
        image_id: &str,
        image: &FeatureMap<T>,
        anchors: &[BoundingBox],
        cfg: &InferenceConfig,
    ) -> Result<Vec<Detection>> {
        let (out, _) = self.forward(image)?;
        let logits = out.flat_logits(0);
        let deltas = out.flat_deltas(0);
        if logits.len() != anchors.len() {
            return Err(Error::shape(format!(
                "{} anchors for {} head outputs",
                anchors.len(),
                logits.len()
            )));
        }
        let mut order: Vec<(f64, usize)> = logits
            .iter()
            .enumerate()
            .map(|(i, &z)| (sigmoid_scalar(z.to_f64_lossy()), i))
            .filter(|&(s, _)| s >= cfg.score_threshold)
            .collect();
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        order.truncate(cfg.pre_nms_top_k);
        let (w, h) = (image.width() as f64, image.height() as f64);
        let mut candidates = Vec::with_capacity(order.len());
        for (score, i) in order {
            let d = BoxDeltas::from_array([
                deltas[4 * i].to_f64_lossy(),
                deltas[4 * i + 1].to_f64_lossy(),
                deltas[4 * i + 2].to_f64_lossy(),
                deltas[4 * i + 3].to_f64_lossy(),
            ]);
            let bbox = decode_box(&anchors[i], &d)?.clip(w, h);
            if bbox.is_valid() {
                candidates.push(Detection {
                    image_id: image_id.to_string(),
                    bbox,
                    score,
                });
            }
        }
        Ok(nms(&candidates, cfg.nms_iou, cfg.score_threshold, cfg.max_detections))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_parameters(path, self)
    }

    /// Detector of the given architecture with weights read from `path`.
    pub fn load(config: ModelConfig, path: impl AsRef<Path>) -> Result<Self> {
        let mut det = Self::new(config, 0)?;
        load_parameters(path, &mut det)?;
        Ok(det)
    }

    pub fn cast<U: Scalar>(&self) -> Result<Detector<U>> {
        let mut out = Detector::<U>::new(self.config.clone(), 0)?;
        let flat: Vec<U> = self.flatten().into_iter().map(|v| U::of(v.to_f64_lossy())).collect();
        out.assign_flat(&flat)?;
        Ok(out)
    }
}

impl<T: Scalar> Parameters<T> for Detector<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        self.fpn.visit(&join(prefix, "fpn"), f);
        for (i, b) in self.boosters.iter().enumerate() {
            b.visit(&join(prefix, &format!("msb.{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        self.fpn.visit_mut(&join(prefix, "fpn"), f);
        for (i, b) in self.boosters.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("msb.{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// SGD with momentum: `v <- mu v + g + lambda w`, `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub learning_rate: T,
    pub momentum: T,
    pub weight_decay: T,
    velocity: Vec<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self {
            learning_rate: T::of(cfg.learning_rate),
            momentum: T::of(cfg.momentum),
            weight_decay: T::of(cfg.weight_decay),
            velocity: Vec::new(),
        }
    }

    pub fn step<P: Parameters<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let g = grads.flatten();
        if self.velocity.is_empty() {
            self.velocity = vec![T::zero(); g.len()];
        }
        if self.velocity.len() != g.len() || params.parameter_count() != g.len() {
            return Err(Error::shape("optimizer state does not match the parameters"));
        }
        let (lr, mu, wd) = (self.learning_rate, self.momentum, self.weight_decay);
        let vel = &mut self.velocity;
        let mut at = 0;
        params.visit_mut("", &mut |_, _, w| {
            for x in w.iter_mut() {
                let v = mu * vel[at] + g[at] + wd * *x;
                vel[at] = v;
                *x -= lr * v;
                at += 1;
            }
        });
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn gradient_norm<T: Scalar, P: Parameters<T>>(grads: &P) -> f64 {
    let mut s = 0.0;
    grads.visit("", &mut |_, _, v| {
        s += v.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>();
    });
    s.sqrt()
}

fn scale_all<T: Scalar, P: Parameters<T>>(p: &mut P, a: T) {
    p.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x *= a));
}

/// One training image: a normalised `(1, C, H, W)` stack and its boxes.
#[derive(Clone, Debug)]
pub struct TrainSample<T> {
    pub image_id: String,
    pub image: FeatureMap<T>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub classification: f64,
    pub regression: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub assignment: AssignmentConfig,
    pub loss: LossConfig,
    pub seed: u64,
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const SAMPLE_STREAM: u64 = 0x5341_4d50;

/// Mini-batch training. Shuffling and anchor sampling draw from streams keyed
/// by `(seed, epoch, image)`, so the run is reproducible bit for bit.
pub fn train<T: Scalar>(
    det: &mut Detector<T>,
    samples: &[TrainSample<T>],
    settings: &TrainSettings,
    mut on_iteration: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    settings.optimizer.validate()?;
    if samples.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let assignments = samples
        .iter()
        .map(|s| {
            let anchors = det.anchors(s.image.height(), s.image.width())?;
            assign_targets(&anchors, &s.boxes, &settings.assignment)
        })
        .collect::<Result<Vec<_>>>()?;

    let opt = &settings.optimizer;
    let mut sgd = Sgd::<T>::new(opt);
    let mut log = Vec::new();
    let mut iteration = 0;
    for epoch in 0..opt.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(settings.seed ^ SHUFFLE_STREAM);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);

        for batch in order.chunks(opt.batch_size) {
            let mut total: Option<Detector<T>> = None;
            let (mut loss, mut cls, mut reg, mut counted) = (0.0, 0.0, 0.0, 0usize);
            for &i in batch {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ SAMPLE_STREAM);
                rng.set_stream(((epoch as u64) << 32) | i as u64);
                let sampled = sample_anchors(&assignments[i], &settings.loss, &mut rng);
                let (l, g) = match det.loss_and_gradient(&samples[i].image, &assignments[i], &sampled, &settings.loss) {
                    Ok(v) => v,
                    Err(Error::Undefined(_)) => continue,
                    Err(e) => return Err(e),
                };
                loss += l.total.to_f64_lossy();
                cls += l.classification.to_f64_lossy();
                reg += l.regression.to_f64_lossy();
                counted += 1;
                match total.as_mut() {
                    Some(t) => crate::params::accumulate(t, &g),
                    None => total = Some(g),
                }
            }
            let Some(mut grads) = total else { continue };
            let k = counted as f64;
            scale_all(&mut grads, T::of(1.0 / k));
            let norm = gradient_norm(&grads);
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!("gradient norm at iteration {iteration}")));
            }
            if opt.max_grad_norm > 0.0 && norm > opt.max_grad_norm {
                scale_all(&mut grads, T::of(opt.max_grad_norm / norm));
            }
            sgd.step(det, &grads)?;
            let rec = LossRecord {
                epoch,
                iteration,
                loss: loss / k,
                classification: cls / k,
                regression: reg / k,
                grad_norm: norm,
            };
            on_iteration(&rec);
            log.push(rec);
            iteration += 1;
        }
    }
    Ok(log)
}

/// Detections for every sample, in sample order.
pub fn detect_all<T: Scalar>(
    det: &Detector<T>,
    samples: &[TrainSample<T>],
    cfg: &InferenceConfig,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    let mut anchors: Option<((usize, usize), Vec<BoundingBox>)> = None;
    for s in samples {
        let hw = (s.image.height(), s.image.width());
        if anchors.as_ref().is_none_or(|(k, _)| *k != hw) {
            anchors = Some((hw, det.anchors(hw.0, hw.1)?));
        }
        let a = &anchors.as_ref().expect("just set").1;
        out.extend(det.detect(&s.image_id, &s.image, a, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelVariant;
    use crate::fpn::BackboneConfig;
    use crate::tensor::Shape;

    pub(crate) fn tiny(variant: ModelVariant) -> ModelConfig {
        let mut m = ModelConfig {
            variant,
            backbone: BackboneConfig {
                input_channels: 3,
                stem_channels: 4,
                stage_channels: vec![4, 4],
                num_levels: 2,
                pyramid_channels: 4,
                smoothing: false,
            },
            ..ModelConfig::default()
        };
        m.msb.hdc.branch_channels = 2;
        m.head.hidden_channels = 4;
        m.anchors.scales = vec![8.0, 16.0];
        m
    }

    #[test]
    fn output_counts_match_anchors() {
        for v in ModelVariant::ALL {
            let det = Detector::<f64>::new(tiny(v), 1).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let x = FeatureMap::random_normal(Shape::new(1, 3, 32, 32), 1.0, &mut rng);
            let (out, _) = det.forward(&x).unwrap();
            assert_eq!(out.flat_logits(0).len(), det.anchors(32, 32).unwrap().len());
            assert_eq!(out.flat_deltas(0).len(), 4 * det.anchors(32, 32).unwrap().len());
        }
    }

    #[test]
    fn sgd_zero_rate_is_noop() {
        let mut det = Detector::<f64>::new(tiny(ModelVariant::FpnMsb), 3).unwrap();
        let before = det.clone();
        let mut g = det.zeros_like();
        g.visit_mut("", &mut |_, _, v| v.iter_mut().for_each(|x| *x = 1.0));
        let cfg = OptimizerConfig {
            learning_rate: 0.0,
            ..OptimizerConfig::default()
        };
        let mut sgd = Sgd::new(&cfg);
        sgd.step(&mut det, &g).unwrap();
        sgd.step(&mut det, &g).unwrap();
        assert_eq!(det, before);
    }

    #[test]
    fn sgd_momentum_arithmetic() {
        let mut f = crate::tensor::Filter::<f64>::zeros(1, 1, 1);
        let mut g = f.zeros_like();
        g.weights[0] = 1.0;
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.5,
            ..OptimizerConfig::default()
        };
        let mut sgd = Sgd::new(&cfg);
        sgd.step(&mut f, &g).unwrap();
        assert!((f.weights[0] + 0.1).abs() < 1e-15);
        sgd.step(&mut f, &g).unwrap();
        // v = 0.5 * 1 + 1 = 1.5
        assert!((f.weights[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn training_reduces_loss_on_one_image() {
        let cfg = tiny(ModelVariant::FpnMsb);
        let mut det = Detector::<f64>::new(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut image = FeatureMap::random_normal(Shape::new(1, 3, 32, 32), 0.1, &mut rng);
        for c in 0..3 {
            for y in 8..20 {
                for x in 10..22 {
                    image.set(0, c, y, x, 1.0);
                }
            }
        }
        let sample = TrainSample {
            image_id: "a".into(),
            image,
            boxes: vec![BoundingBox::new(10.0, 8.0, 22.0, 20.0).unwrap()],
        };
        let settings = TrainSettings {
            optimizer: OptimizerConfig {
                epochs: 40,
                batch_size: 1,
                ..OptimizerConfig::default()
            },
            loss: LossConfig {
                batch_per_image: 10_000,
                ..LossConfig::default()
            },
            ..TrainSettings::default()
        };
        let log = train(&mut det, &[sample], &settings, |_| {}).unwrap();
        assert!(log.last().unwrap().loss < 0.5 * log[0].loss, "{:?}", (log[0].loss, log.last().unwrap().loss));
    }

    #[test]
    fn checkpoint_round_trip() {
        let det = Detector::<f32>::new(tiny(ModelVariant::FpnHdcSp), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        det.save(&path).unwrap();
        let back = Detector::<f32>::load(det.config.clone(), &path).unwrap();
        assert_eq!(back, det);
        let other = tiny(ModelVariant::Fpn);
        assert!(Detector::<f32>::load(other, &path).is_err());
    }
}
