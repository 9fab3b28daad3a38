//! Run configuration shared by every command, read from and written as TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection::{AnchorLayout, AssignmentConfig, HeadConfig, LossConfig};
use crate::fpn::BackboneConfig;
use crate::froc::{EvalOptions, SensitivityMode, SizeBuckets, DEFAULT_FP_RATES, DEFAULT_MATCH_IOU};
use crate::msb::MsbConfig;
use crate::synth::{PhantomSpec, SplitCounts};
use crate::{Error, Result};

/// Rows of the ablation grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelVariant {
    /// Pyramid maps go straight to the head.
    Fpn,
    /// HDC with channel and spatial attention.
    #[default]
    FpnMsb,
    /// HDC only.
    FpnHdc,
    /// HDC with channel attention.
    FpnHdcCh,
    /// HDC with spatial attention.
    FpnHdcSp,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Fpn,
        ModelVariant::FpnMsb,
        ModelVariant::FpnHdc,
        ModelVariant::FpnHdcCh,
        ModelVariant::FpnHdcSp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelVariant::Fpn => "fpn",
            ModelVariant::FpnMsb => "fpn+msb",
            ModelVariant::FpnHdc => "fpn+hdc",
            ModelVariant::FpnHdcCh => "fpn+hdc+ch",
            ModelVariant::FpnHdcSp => "fpn+hdc+sp",
        }
    }

    /// Booster settings for this row, `None` for plain FPN. Attention flags
    /// of `base` are overridden; everything else is kept.
    pub fn booster(&self, base: &MsbConfig) -> Option<MsbConfig> {
        let (ch, sp) = match self {
            ModelVariant::Fpn => return None,
            ModelVariant::FpnMsb => (true, true),
            ModelVariant::FpnHdc => (false, false),
            ModelVariant::FpnHdcCh => (true, false),
            ModelVariant::FpnHdcSp => (false, true),
        };
        Some(MsbConfig {
            channel_attention: ch,
            spatial_attention: sp,
            ..base.clone()
        })
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = ModelVariant::ALL.iter().map(|v| v.name()).collect();
                Error::Parse(format!("unknown model `{s}`; expected one of {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for ModelVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelVariant> for String {
    fn from(v: ModelVariant) -> String {
        v.name().to_string()
    }
}

/// Architecture of a detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub backbone: BackboneConfig,
    pub msb: MsbConfig,
    pub head: HeadConfig,
    pub anchors: AnchorLayout,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let backbone = BackboneConfig {
            num_levels: 5,
            stage_channels: vec![16, 32, 32, 32, 32],
            ..BackboneConfig::default()
        };
        let mut msb = MsbConfig::default();
        msb.hdc.branch_channels = backbone.pyramid_channels;
        Self {
            variant: ModelVariant::default(),
            backbone,
            msb,
            head: HeadConfig::default(),
            anchors: AnchorLayout::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.msb.hdc.validate()?;
        self.anchors.validate(self.backbone.num_levels)?;
        if self.head.hidden_channels == 0 {
            return Err(Error::config("head.hidden_channels must be >= 1"));
        }
        Ok(())
    }

    pub fn booster(&self) -> Option<MsbConfig> {
        self.variant.booster(&self.msb)
    }

    /// Width of the maps the head consumes.
    pub fn head_in_channels(&self) -> usize {
        match self.booster() {
            Some(m) => m.hdc.output_channels(),
            None => self.backbone.pyramid_channels,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Images per parameter update.
    pub batch_size: usize,
    /// Rescale the gradient when its global L2 norm exceeds this; 0 disables.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 2,
            max_grad_norm: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.max_grad_norm >= 0.0) {
            return Err(Error::config("weight_decay and max_grad_norm must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }
}

/// Post-processing of raw head outputs into detections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    /// Highest-scoring candidates kept before suppression.
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.0,
            pre_nms_top_k: 1000,
            nms_iou: 0.7,
            max_detections: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub fp_rates: Vec<f64>,
    pub mode: SensitivityMode,
    pub bucket_edges_mm: Vec<f64>,
    /// FP rate fixing the threshold of the size-bucket table.
    pub bucket_fp_rate: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_MATCH_IOU,
            fp_rates: DEFAULT_FP_RATES.to_vec(),
            mode: SensitivityMode::Step,
            bucket_edges_mm: SizeBuckets::default().edges,
            bucket_fp_rate: 4.0,
        }
    }
}

impl EvalConfig {
    pub fn options(&self) -> Result<EvalOptions> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold <= 1.0) {
            return Err(Error::config(format!(
                "iou_threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )));
        }
        if self.fp_rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("fp_rates must be finite and >= 0"));
        }
        Ok(EvalOptions {
            iou_threshold: self.iou_threshold,
            fp_rates: self.fp_rates.clone(),
            mode: self.mode,
            buckets: SizeBuckets::new(self.bucket_edges_mm.clone())?,
            bucket_fp_rate: self.bucket_fp_rate,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub precision: Precision,
    pub epsilon: f64,
    /// Bound on the relative error of single operations.
    pub op_tolerance: f64,
    /// Bound for composed pipelines.
    pub pipeline_tolerance: f64,
    /// Seed of the random probe points.
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F64,
            epsilon: 1e-4,
            op_tolerance: 1e-5,
            pipeline_tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomSpec,
    pub counts: SplitCounts,
}

/// Everything one run needs; written verbatim into each run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub assignment: AssignmentConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub inference: InferenceConfig,
    pub eval: EvalConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            assignment: AssignmentConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            inference: InferenceConfig::default(),
            eval: EvalConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.phantom.validate()?;
        self.optimizer.validate()?;
        self.eval.options()?;
        let s = self.model.backbone.max_stride();
        if self.data.phantom.image_size % s != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by the largest stride {s}",
                self.data.phantom.image_size
            )));
        }
        let a = &self.assignment;
        if !(0.0 <= a.negative_iou && a.negative_iou <= a.positive_iou && a.positive_iou <= 1.0) {
            return Err(Error::config("need 0 <= negative_iou <= positive_iou <= 1"));
        }
        if self.loss.batch_per_image == 0 || !(0.0..=1.0).contains(&self.loss.positive_fraction) {
            return Err(Error::config("loss.batch_per_image must be >= 1 and positive_fraction in [0, 1]"));
        }
        if !(self.loss.smooth_l1_beta > 0.0) {
            return Err(Error::config("loss.smooth_l1_beta must be positive"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[model]\nvariant = \"fpn+hdc+ch\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.variant, ModelVariant::FpnHdcCh);
        assert_eq!(cfg.optimizer.learning_rate, 0.01);
        assert_eq!(cfg.optimizer.epochs, 10);
    }

    #[test]
    fn unknown_keys_and_variants_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 1\n"), Err(Error::Parse(_))));
        assert!(matches!(
            RunConfig::from_toml("[model]\nvariant = \"fpn+xyz\"\n"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn variants_map_to_attention_flags() {
        let base = MsbConfig::default();
        assert!(ModelVariant::Fpn.booster(&base).is_none());
        let ch = ModelVariant::FpnHdcCh.booster(&base).unwrap();
        assert!(ch.channel_attention && !ch.spatial_attention);
        let sp = ModelVariant::FpnHdcSp.booster(&base).unwrap();
        assert!(!sp.channel_attention && sp.spatial_attention);
        for v in ModelVariant::ALL {
            assert_eq!(v.name().parse::<ModelVariant>().unwrap(), v);
        }
    }

    #[test]
    fn head_width_follows_variant() {
        let mut m = ModelConfig::default();
        assert_eq!(m.head_in_channels(), 4 * m.msb.hdc.branch_channels);
        m.variant = ModelVariant::Fpn;
        assert_eq!(m.head_in_channels(), m.backbone.pyramid_channels);
    }
}
