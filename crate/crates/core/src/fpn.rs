//! Bottom-up backbone, top-down pathway and skip fusion `P_i = C_i^D + C_i^U`.
//!
//! The backbone is a plain CNN: a stride-2 stem followed by one stride-2
//! 3x3 convolution per pyramid level, each with ReLU. Level `i` (1-based)
//! therefore has stride `2^(i+1)`. A 1x1 lateral convolution maps every
//! level to the common pyramid width, giving `C_i^D`.
//!
//! The top-down map at the coarsest level is `C^D` itself and every finer
//! `C_i^U` is the nearest-neighbour 2x upsampling of `C_{i+1}^U`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{join, Parameters};
use crate::tensor::{
    conv2d, conv2d_backward, elementwise_add, relu, relu_backward, upsample_nearest2x,
    upsample_nearest2x_backward, ConvSpec, FeatureMap, Filter,
};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// One channel per consecutive slice.
    pub input_channels: usize,
    pub stem_channels: usize,
    /// Width of the backbone stage feeding each level, finest first.
    pub stage_channels: Vec<usize>,
    pub num_levels: usize,
    /// Common width of every `C_i^D` and `P_i`.
    pub pyramid_channels: usize,
    /// Optional 3x3 convolution on each fused level.
    pub smoothing: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            input_channels: 3,
            stem_channels: 16,
            stage_channels: vec![16, 32, 32, 32],
            num_levels: 4,
            pyramid_channels: 32,
            smoothing: false,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_levels == 0 {
            return Err(Error::config("num_levels must be >= 1"));
        }
        if self.stage_channels.len() != self.num_levels {
            return Err(Error::config(format!(
                "stage_channels has {} entries for {} levels",
                self.stage_channels.len(),
                self.num_levels
            )));
        }
        let widths = [self.input_channels, self.stem_channels, self.pyramid_channels];
        if widths.iter().chain(&self.stage_channels).any(|&c| c == 0) {
            return Err(Error::config("channel counts must be >= 1"));
        }
        Ok(())
    }

    /// Stride of each level relative to the input: 4, 8, 16, ...
    pub fn level_strides(&self) -> Vec<usize> {
        (1..=self.num_levels).map(|i| 1usize << (i + 1)).collect()
    }

    pub fn max_stride(&self) -> usize {
        1usize << (self.num_levels + 1)
    }
}

fn stride2() -> ConvSpec {
    ConvSpec {
        dilation: 1,
        stride: 2,
        padding: 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpnParams<T> {
    pub stem: Filter<T>,
    pub stages: Vec<Filter<T>>,
    pub laterals: Vec<Filter<T>>,
    pub smoothing: Option<Vec<Filter<T>>>,
}

impl<T: Scalar> FpnParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let stem = Filter::he_normal(cfg.stem_channels, cfg.input_channels, 3, rng);
        let mut stages = Vec::with_capacity(cfg.num_levels);
        let mut prev = cfg.stem_channels;
        for &c in &cfg.stage_channels {
            stages.push(Filter::he_normal(c, prev, 3, rng));
            prev = c;
        }
        let laterals = cfg
            .stage_channels
            .iter()
            .map(|&c| Filter::random_normal(cfg.pyramid_channels, c, 1, (1.0 / c as f64).sqrt(), rng))
            .collect();
        let smoothing = cfg.smoothing.then(|| {
            (0..cfg.num_levels)
                .map(|_| {
                    let fan = (cfg.pyramid_channels * 9) as f64;
                    Filter::random_normal(cfg.pyramid_channels, cfg.pyramid_channels, 3, (1.0 / fan).sqrt(), rng)
                })
                .collect()
        });
        Ok(Self {
            stem,
            stages,
            laterals,
            smoothing,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            stem: self.stem.zeros_like(),
            stages: self.stages.iter().map(Filter::zeros_like).collect(),
            laterals: self.laterals.iter().map(Filter::zeros_like).collect(),
            smoothing: self
                .smoothing
                .as_ref()
                .map(|v| v.iter().map(Filter::zeros_like).collect()),
        }
    }
}

impl<T: Scalar> Parameters<T> for FpnParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stages.visit(&join(prefix, "stage"), f);
        self.laterals.visit(&join(prefix, "lateral"), f);
        self.smoothing.visit(&join(prefix, "smooth"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stages.visit_mut(&join(prefix, "stage"), f);
        self.laterals.visit_mut(&join(prefix, "lateral"), f);
        self.smoothing.visit_mut(&join(prefix, "smooth"), f);
    }
}

/// Retained forward state of the backbone.
#[derive(Clone, Debug)]
pub struct BackboneCache<T> {
    input: FeatureMap<T>,
    stem_pre: FeatureMap<T>,
    stem_out: FeatureMap<T>,
    stage_pre: Vec<FeatureMap<T>>,
    stage_out: Vec<FeatureMap<T>>,
}

fn check_input<T: Scalar>(image: &FeatureMap<T>, cfg: &BackboneConfig) -> Result<()> {
    cfg.validate()?;
    if image.channels() != cfg.input_channels {
        return Err(Error::shape(format!(
            "backbone expects {} input channels, got {}",
            cfg.input_channels,
            image.channels()
        )));
    }
    let s = cfg.max_stride();
    if image.height() % s != 0 || image.width() % s != 0 {
        return Err(Error::shape(format!(
            "input {}x{} is not divisible by the largest stride {s}",
            image.height(),
            image.width()
        )));
    }
    Ok(())
}

/// The list of `C_i^D`, finest level first.
pub fn bottom_up<T: Scalar>(
    image: &FeatureMap<T>,
    params: &FpnParams<T>,
    cfg: &BackboneConfig,
) -> Result<Vec<FeatureMap<T>>> {
    bottom_up_with_cache(image, params, cfg).map(|(maps, _)| maps)
}

pub fn bottom_up_with_cache<T: Scalar>(
    image: &FeatureMap<T>,
    params: &FpnParams<T>,
    cfg: &BackboneConfig,
) -> Result<(Vec<FeatureMap<T>>, BackboneCache<T>)> {
    check_input(image, cfg)?;
    let stem_pre = conv2d(image, &params.stem, stride2())?;
    let stem_out = relu(&stem_pre);
    let mut stage_pre = Vec::with_capacity(cfg.num_levels);
    let mut stage_out: Vec<FeatureMap<T>> = Vec::with_capacity(cfg.num_levels);
    let mut down = Vec::with_capacity(cfg.num_levels);
    for (stage, lateral) in params.stages.iter().zip(&params.laterals) {
        let prev = stage_out.last().unwrap_or(&stem_out);
        let pre = conv2d(prev, stage, stride2())?;
        let out = relu(&pre);
        down.push(conv2d(&out, lateral, ConvSpec::default())?);
        stage_pre.push(pre);
        stage_out.push(out);
    }
    let cache = BackboneCache {
        input: image.clone(),
        stem_pre,
        stem_out,
        stage_pre,
        stage_out,
    };
    Ok((down, cache))
}

/// Accumulates backbone parameter gradients given `dL/dC_i^D`.
pub fn bottom_up_backward<T: Scalar>(
    params: &FpnParams<T>,
    cache: &BackboneCache<T>,
    grad_down: &[FeatureMap<T>],
    grads: &mut FpnParams<T>,
) -> Result<()> {
    let levels = params.stages.len();
    if grad_down.len() != levels {
        return Err(Error::shape(format!(
            "{} level gradients for {levels} levels",
            grad_down.len()
        )));
    }
    let mut carry: Option<FeatureMap<T>> = None;
    for i in (0..levels).rev() {
        let lat = conv2d_backward(&cache.stage_out[i], &params.laterals[i], ConvSpec::default(), &grad_down[i])?;
        add_filter(&mut grads.laterals[i], &lat.filter);
        let mut g_out = lat.input;
        if let Some(c) = carry.take() {
            g_out.add_assign(&c)?;
        }
        let g_pre = relu_backward(&cache.stage_pre[i], &g_out)?;
        let prev = if i == 0 { &cache.stem_out } else { &cache.stage_out[i - 1] };
        let st = conv2d_backward(prev, &params.stages[i], stride2(), &g_pre)?;
        add_filter(&mut grads.stages[i], &st.filter);
        carry = Some(st.input);
    }
    let g_stem = relu_backward(&cache.stem_pre, &carry.expect("at least one level"))?;
    let stem = conv2d_backward(&cache.input, &params.stem, stride2(), &g_stem)?;
    add_filter(&mut grads.stem, &stem.filter);
    Ok(())
}

pub(crate) fn add_filter<T: Scalar>(into: &mut Filter<T>, g: &Filter<T>) {
    for (a, &b) in into.weights.iter_mut().zip(&g.weights) {
        *a += b;
    }
    if let (Some(a), Some(b)) = (into.bias.as_mut(), g.bias.as_ref()) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x += y;
        }
    }
}

/// One pyramid level: `P = C^D + C^U` (before optional smoothing).
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel<T> {
    pub down: FeatureMap<T>,
    pub up: FeatureMap<T>,
    pub fused: FeatureMap<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    /// Finest level first.
    pub levels: Vec<PyramidLevel<T>>,
}

impl<T: Scalar> Pyramid<T> {
    pub fn fused(&self) -> Vec<&FeatureMap<T>> {
        self.levels.iter().map(|l| &l.fused).collect()
    }

    pub fn down(&self) -> Vec<&FeatureMap<T>> {
        self.levels.iter().map(|l| &l.down).collect()
    }
}

fn check_geometry<T: Scalar>(down: &[FeatureMap<T>]) -> Result<()> {
    if down.is_empty() {
        return Err(Error::shape("top_down_fuse needs at least one level"));
    }
    for pair in down.windows(2) {
        let (fine, coarse) = (pair[0].shape(), pair[1].shape());
        if fine.batch != coarse.batch
            || fine.channels != coarse.channels
            || fine.height != 2 * coarse.height
            || fine.width != 2 * coarse.width
        {
            return Err(Error::shape(format!(
                "levels {fine} and {coarse} are not a factor-2 pyramid step"
            )));
        }
    }
    Ok(())
}

/// Builds `C_i^U` by repeated 2x upsampling from the coarsest level and
/// fuses each level by addition.
pub fn top_down_fuse<T: Scalar>(down: Vec<FeatureMap<T>>) -> Result<Pyramid<T>> {
    check_geometry(&down)?;
    let mut up: Vec<FeatureMap<T>> = Vec::with_capacity(down.len());
    for (k, d) in down.iter().enumerate().rev() {
        let u = if k + 1 == down.len() {
            d.clone()
        } else {
            upsample_nearest2x(up.last().expect("coarser level built first"))
        };
        up.push(u);
    }
    up.reverse();
    let levels = down
        .into_iter()
        .zip(up)
        .map(|(d, u)| {
            let fused = elementwise_add(&d, &u)?;
            Ok(PyramidLevel { down: d, up: u, fused })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { levels })
}

/// `dL/dC_i^D` from `dL/dP_i`.
pub fn top_down_fuse_backward<T: Scalar>(
    pyramid: &Pyramid<T>,
    grad_fused: &[FeatureMap<T>],
) -> Result<Vec<FeatureMap<T>>> {
    let levels = pyramid.levels.len();
    if grad_fused.len() != levels {
        return Err(Error::shape(format!(
            "{} fused gradients for {levels} levels",
            grad_fused.len()
        )));
    }
    let mut grad_down: Vec<FeatureMap<T>> = grad_fused.to_vec();
    let mut g_up: Option<FeatureMap<T>> = None;
    for i in 0..levels {
        let mut g = grad_fused[i].clone();
        if let Some(finer) = g_up.take() {
            g.add_assign(&upsample_nearest2x_backward(pyramid.levels[i].up.shape(), &finer)?)?;
        }
        g_up = Some(g);
    }
    grad_down[levels - 1].add_assign(&g_up.expect("non-empty"))?;
    Ok(grad_down)
}

/// Retained state of a full pyramid forward pass.
#[derive(Clone, Debug)]
pub struct FpnCache<T> {
    backbone: BackboneCache<T>,
    pub pyramid: Pyramid<T>,
}

/// Backbone, fusion and optional smoothing. Returns the per-level maps the
/// detector consumes (`P_i`, smoothed when enabled).
pub fn fpn_forward<T: Scalar>(
    image: &FeatureMap<T>,
    params: &FpnParams<T>,
    cfg: &BackboneConfig,
) -> Result<(Vec<FeatureMap<T>>, FpnCache<T>)> {
    let (down, backbone) = bottom_up_with_cache(image, params, cfg)?;
    let pyramid = top_down_fuse(down)?;
    let outputs = match &params.smoothing {
        Some(smooth) => pyramid
            .levels
            .iter()
            .zip(smooth)
            .map(|(l, f)| conv2d(&l.fused, f, ConvSpec::same(3, 1)))
            .collect::<Result<Vec<_>>>()?,
        None => pyramid.levels.iter().map(|l| l.fused.clone()).collect(),
    };
    Ok((outputs, FpnCache { backbone, pyramid }))
}

/// Accumulates parameter gradients from `dL/d outputs` of [`fpn_forward`].
pub fn fpn_backward<T: Scalar>(
    params: &FpnParams<T>,
    cache: &FpnCache<T>,
    grad_outputs: &[FeatureMap<T>],
    grads: &mut FpnParams<T>,
) -> Result<()> {
    let grad_fused = match (&params.smoothing, grads.smoothing.as_mut()) {
        (Some(smooth), Some(gsmooth)) => {
            let mut out = Vec::with_capacity(smooth.len());
            for ((l, f), (g, gf)) in cache
                .pyramid
                .levels
                .iter()
                .zip(smooth)
                .zip(grad_outputs.iter().zip(gsmooth.iter_mut()))
            {
                let cg = conv2d_backward(&l.fused, f, ConvSpec::same(3, 1), g)?;
                add_filter(gf, &cg.filter);
                out.push(cg.input);
            }
            out
        }
        _ => grad_outputs.to_vec(),
    };
    let grad_down = top_down_fuse_backward(&cache.pyramid, &grad_fused)?;
    bottom_up_backward(params, &cache.backbone, &grad_down, grads)
}

/// Accumulates backbone gradients given `dL/dC_i^D` taken directly from
/// the lateral maps, bypassing the fusion.
pub fn fpn_backward_from_down<T: Scalar>(
    params: &FpnParams<T>,
    cache: &FpnCache<T>,
    grad_down: &[FeatureMap<T>],
    grads: &mut FpnParams<T>,
) -> Result<()> {
    bottom_up_backward(params, &cache.backbone, grad_down, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_strides() {
        assert_eq!(BackboneConfig::default().level_strides(), vec![4, 8, 16, 32]);
    }

    #[test]
    fn spatial_sizes_for_64_input() {
        let cfg = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FpnParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = FeatureMap::random_normal(Shape::new(1, 3, 64, 64), 1.0, &mut rng);
        let down = bottom_up(&x, &p, &cfg).unwrap();
        let sizes: Vec<_> = down.iter().map(|m| (m.height(), m.width())).collect();
        assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert!(down.iter().all(|m| m.channels() == 32));
    }

    #[test]
    fn zero_input_zero_pyramid() {
        let cfg = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = FpnParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = FeatureMap::zeros(Shape::new(1, 3, 32, 32));
        let (out, _) = fpn_forward(&x, &p, &cfg).unwrap();
        assert!(out.iter().all(|m| m.max_abs() == 0.0));
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = BackboneConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FpnParams::<f64>::init(&cfg, &mut rng).unwrap();
        let x = FeatureMap::zeros(Shape::new(1, 3, 48, 40));
        assert!(matches!(bottom_up(&x, &p, &cfg), Err(Error::Shape(_))));
    }

    #[test]
    fn single_level_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = FeatureMap::<f64>::random_normal(Shape::new(1, 2, 3, 3), 1.0, &mut rng);
        let p = top_down_fuse(vec![d.clone()]).unwrap();
        assert_eq!(p.levels[0].fused, d.scale(2.0));
    }

    #[test]
    fn zero_coarsest_leaves_finer_levels() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d0 = FeatureMap::<f64>::random_normal(Shape::new(1, 2, 8, 8), 1.0, &mut rng);
        let d1 = FeatureMap::<f64>::random_normal(Shape::new(1, 2, 4, 4), 1.0, &mut rng);
        let d2 = FeatureMap::<f64>::zeros(Shape::new(1, 2, 2, 2));
        let p = top_down_fuse(vec![d0.clone(), d1.clone(), d2]).unwrap();
        assert_eq!(p.levels[0].fused, d0);
        assert_eq!(p.levels[1].fused, d1);
    }

    #[test]
    fn bad_geometry_rejected() {
        let a = FeatureMap::<f64>::zeros(Shape::new(1, 2, 8, 8));
        let b = FeatureMap::<f64>::zeros(Shape::new(1, 2, 3, 4));
        assert!(top_down_fuse(vec![a, b]).is_err());
    }
}
