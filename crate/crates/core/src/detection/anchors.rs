use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::BoundingBox;
use crate::{Error, Result};

/// Width-to-height ratio written `w:h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AspectRatio {
    pub w: f64,
    pub h: f64,
}

impl AspectRatio {
    pub const fn new(w: f64, h: f64) -> Self {
        Self { w, h }
    }

    /// Side lengths of an anchor of area `scale²` with this ratio.
    pub fn anchor_size(&self, scale: f64) -> (f64, f64) {
        let r = self.w / self.h;
        (scale * r.sqrt(), scale / r.sqrt())
    }
}

impl fmt::Display for AspectRatio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.w, self.h)
    }
}

impl FromStr for AspectRatio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (w, h) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("aspect ratio `{s}` is not of the form w:h")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite() && *x > 0.0)
                .ok_or_else(|| Error::Parse(format!("bad aspect ratio component `{v}`")))
        };
        Ok(Self::new(parse(w)?, parse(h)?))
    }
}

impl TryFrom<String> for AspectRatio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AspectRatio> for String {
    fn from(r: AspectRatio) -> String {
        r.to_string()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorAssignment {
    /// Scale `i` on pyramid level `i`.
    #[default]
    OneScalePerLevel,
    /// Every scale on every level.
    AllScalesPerLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorLayout {
    /// Side length in pixels of the 1:1 anchor of each scale.
    pub scales: Vec<f64>,
    pub ratios: Vec<AspectRatio>,
    pub assignment: AnchorAssignment,
}

impl Default for AnchorLayout {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 16.0, 32.0, 64.0, 128.0],
            ratios: vec![
                AspectRatio::new(1.0, 2.0),
                AspectRatio::new(1.0, 1.0),
                AspectRatio::new(2.0, 1.0),
            ],
            assignment: AnchorAssignment::OneScalePerLevel,
        }
    }
}

impl AnchorLayout {
    pub fn validate(&self, num_levels: usize) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(Error::config("anchor layout needs at least one scale and ratio"));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config("anchor scales must be positive"));
        }
        if self.assignment == AnchorAssignment::OneScalePerLevel && self.scales.len() != num_levels {
            return Err(Error::config(format!(
                "one-scale-per-level needs one scale per pyramid level: {} scales, {num_levels} levels",
                self.scales.len()
            )));
        }
        Ok(())
    }

    pub fn scales_at_level(&self, level: usize) -> &[f64] {
        match self.assignment {
            AnchorAssignment::OneScalePerLevel => &self.scales[level..level + 1],
            AnchorAssignment::AllScalesPerLevel => &self.scales,
        }
    }

    /// Anchors per spatial cell; identical on every level.
    pub fn anchors_per_cell(&self) -> usize {
        let per_level_scales = match self.assignment {
            AnchorAssignment::OneScalePerLevel => 1,
            AnchorAssignment::AllScalesPerLevel => self.scales.len(),
        };
        per_level_scales * self.ratios.len()
    }
}

/// Anchors for every level, ordered by row, column, scale, then ratio.
///
/// Cell `(y, x)` of a level with stride `s` is centered at
/// `((x + 0.5) s, (y + 0.5) s)`.
pub fn generate_anchors(
    layout: &AnchorLayout,
    level_shapes: &[(usize, usize)],
    level_strides: &[usize],
) -> Result<Vec<Vec<BoundingBox>>> {
    if level_shapes.len() != level_strides.len() {
        return Err(Error::shape(format!(
            "{} level shapes for {} strides",
            level_shapes.len(),
            level_strides.len()
        )));
    }
    layout.validate(level_shapes.len())?;
    let mut out = Vec::with_capacity(level_shapes.len());
    for (level, (&(h, w), &stride)) in level_shapes.iter().zip(level_strides).enumerate() {
        let scales = layout.scales_at_level(level);
        let mut boxes = Vec::with_capacity(h * w * scales.len() * layout.ratios.len());
        let s = stride as f64;
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * s, (y as f64 + 0.5) * s);
                for &scale in scales {
                    for ratio in &layout.ratios {
                        let (bw, bh) = ratio.anchor_size(scale);
                        boxes.push(BoundingBox::from_center(cx, cy, bw, bh));
                    }
                }
            }
        }
        out.push(boxes);
    }
    Ok(out)
}
