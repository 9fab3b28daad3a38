//! The multi-scale booster applied to one pyramid level.
//!
//! ```text
//! H   = [D_r1(X); D_r2(X); D_r3(X); M(X)]      shared 3x3 filter, 1x1 mapping M
//! Hch = σ(avgpool(H) * W1x1) ⊗ H               channel gate (N, 4C, 1, 1)
//! P̂   = σ(maxpool_c(Hch) * W3x3) ⊗ Hch         spatial gate (N, 1, H, W)
//! ```
//!
//! Every dilated branch reuses the same weights and bias; only the dilation
//! rate (and the matching `same` padding `r(k-1)/2`) differs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fpn::add_filter;
use crate::params::{join, Parameters};
use crate::tensor::{
    broadcast_mul, broadcast_mul_backward, channel_max_pool, channel_max_pool_backward,
    concat_channels, conv2d, conv2d_backward, elementwise_add, gate_kind, global_avg_pool,
    global_avg_pool_backward, sigmoid, sigmoid_backward, split_channels, ConvSpec, FeatureMap,
    Filter, GateKind,
};
use crate::{Error, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdcConfig {
    pub dilation_rates: Vec<usize>,
    pub kernel_size: usize,
    pub branch_channels: usize,
}

impl Default for HdcConfig {
    fn default() -> Self {
        Self {
            dilation_rates: vec![1, 2, 3],
            kernel_size: 3,
            branch_channels: 32,
        }
    }
}

impl HdcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != 3 {
            return Err(Error::config(format!(
                "exactly three dilation rates are required, got {:?}",
                self.dilation_rates
            )));
        }
        if self.dilation_rates[0] == 0 || self.dilation_rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "dilation rates must be >= 1 and strictly increasing, got {:?}",
                self.dilation_rates
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("HDC kernel size must be odd"));
        }
        if self.branch_channels == 0 {
            return Err(Error::config("branch_channels must be >= 1"));
        }
        Ok(())
    }

    /// Channels of the concatenated HDC output: three dilated branches plus the mapping.
    pub fn output_channels(&self) -> usize {
        4 * self.branch_channels
    }
}

/// Nonlinearity applied after each attention convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateActivation {
    #[default]
    Sigmoid,
    /// Raw convolution output; gates are unbounded.
    Identity,
}

/// How the spatially gated map becomes the level output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsbOutput {
    /// `P̂ = F_sp ⊗ Hch`.
    #[default]
    Multiplicative,
    /// `P̂ = F_sp ⊗ Hch + Hch`.
    Residual,
}

/// Which pyramid map feeds the booster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsbInput {
    /// The bottom-up lateral map `C_i^D`.
    Down,
    /// The fused map `P_i`.
    #[default]
    Fused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsbConfig {
    pub hdc: HdcConfig,
    pub channel_attention: bool,
    pub spatial_attention: bool,
    pub gate: GateActivation,
    pub output: MsbOutput,
    pub input: MsbInput,
}

impl Default for MsbConfig {
    fn default() -> Self {
        Self {
            hdc: HdcConfig::default(),
            channel_attention: true,
            spatial_attention: true,
            gate: GateActivation::Sigmoid,
            output: MsbOutput::Multiplicative,
            input: MsbInput::Fused,
        }
    }
}

impl MsbConfig {
    fn hdc_spec(&self, rate: usize) -> ConvSpec {
        ConvSpec::same(self.hdc.kernel_size, rate)
    }
}

/// Learnable tensors of one booster.
#[derive(Clone, Debug, PartialEq)]
pub struct MsbParams<T> {
    /// `W`, reused by every dilated branch.
    pub shared_filter: Filter<T>,
    /// `M`, the 1x1 dimension mapping.
    pub mapping_filter: Filter<T>,
    /// `W1x1` of the channel gate.
    pub channel_attn_filter: Filter<T>,
    /// `W3x3` of the spatial gate, one channel in and out.
    pub spatial_attn_filter: Filter<T>,
}

impl<T: Scalar> MsbParams<T> {
    pub fn init<R: Rng + ?Sized>(in_channels: usize, cfg: &MsbConfig, rng: &mut R) -> Result<Self> {
        cfg.hdc.validate()?;
        let b = cfg.hdc.branch_channels;
        let k = cfg.hdc.kernel_size;
        let wide = cfg.hdc.output_channels();
        let params = Self {
            shared_filter: Filter::he_normal(b, in_channels, k, rng),
            mapping_filter: Filter::random_normal(b, in_channels, 1, (1.0 / in_channels as f64).sqrt(), rng),
            channel_attn_filter: Filter::random_normal(wide, wide, 1, (1.0 / wide as f64).sqrt(), rng),
            spatial_attn_filter: Filter::random_normal(1, 1, 3, (1.0f64 / 9.0).sqrt(), rng),
        };
        params.validate(cfg)?;
        Ok(params)
    }

    pub fn validate(&self, cfg: &MsbConfig) -> Result<()> {
        cfg.hdc.validate()?;
        let b = cfg.hdc.branch_channels;
        let s = &self.shared_filter;
        if s.out_channels != b || s.kernel_h != cfg.hdc.kernel_size || s.kernel_w != cfg.hdc.kernel_size {
            return Err(Error::config(format!(
                "shared filter is {:?}, expected {b} outputs with a {k}x{k} kernel",
                s.weight_dims(),
                k = cfg.hdc.kernel_size
            )));
        }
        let m = &self.mapping_filter;
        if m.out_channels != s.out_channels || m.in_channels != s.in_channels || m.kernel_h != 1 || m.kernel_w != 1 {
            return Err(Error::config(format!(
                "mapping filter {:?} must be 1x1 from {} to {} channels",
                m.weight_dims(),
                s.in_channels,
                s.out_channels
            )));
        }
        let wide = cfg.hdc.output_channels();
        let c = &self.channel_attn_filter;
        if c.in_channels != wide || c.out_channels != wide || c.kernel_h != 1 || c.kernel_w != 1 {
            return Err(Error::config(format!(
                "channel attention filter {:?} must be 1x1 over {wide} channels",
                c.weight_dims()
            )));
        }
        let sp = &self.spatial_attn_filter;
        if sp.in_channels != 1 || sp.out_channels != 1 || sp.kernel_h != 3 || sp.kernel_w != 3 {
            return Err(Error::config(format!(
                "spatial attention filter {:?} must be 3x3 with one channel in and out",
                sp.weight_dims()
            )));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shared_filter: self.shared_filter.zeros_like(),
            mapping_filter: self.mapping_filter.zeros_like(),
            channel_attn_filter: self.channel_attn_filter.zeros_like(),
            spatial_attn_filter: self.spatial_attn_filter.zeros_like(),
        }
    }

    /// Parameters of the HDC stage alone: `|W| + |M|`.
    pub fn hdc_parameter_count(&self) -> usize {
        self.shared_filter.parameter_count() + self.mapping_filter.parameter_count()
    }
}

impl<T: Scalar> Parameters<T> for MsbParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        self.shared_filter.visit(&join(prefix, "hdc_shared"), f);
        self.mapping_filter.visit(&join(prefix, "hdc_mapping"), f);
        self.channel_attn_filter.visit(&join(prefix, "channel_attn"), f);
        self.spatial_attn_filter.visit(&join(prefix, "spatial_attn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        self.shared_filter.visit_mut(&join(prefix, "hdc_shared"), f);
        self.mapping_filter.visit_mut(&join(prefix, "hdc_mapping"), f);
        self.channel_attn_filter.visit_mut(&join(prefix, "channel_attn"), f);
        self.spatial_attn_filter.visit_mut(&join(prefix, "spatial_attn"), f);
    }
}

fn check_level<T: Scalar>(level_map: &FeatureMap<T>, params: &MsbParams<T>) -> Result<()> {
    if level_map.channels() != params.shared_filter.in_channels {
        return Err(Error::shape(format!(
            "level map has {} channels, shared filter expects {}",
            level_map.channels(),
            params.shared_filter.in_channels
        )));
    }
    Ok(())
}

/// `H = [D_r1(X); D_r2(X); D_r3(X); M(X)]`.
pub fn hdc_forward<T: Scalar>(
    level_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    cfg: &MsbConfig,
) -> Result<FeatureMap<T>> {
    cfg.hdc.validate()?;
    check_level(level_map, params)?;
    let mut branches = Vec::with_capacity(4);
    for &r in &cfg.hdc.dilation_rates {
        branches.push(conv2d(level_map, &params.shared_filter, cfg.hdc_spec(r))?);
    }
    branches.push(conv2d(level_map, &params.mapping_filter, ConvSpec::default())?);
    concat_channels(&branches.iter().collect::<Vec<_>>())
}

/// Accumulates `W`/`M` gradients and returns `dL/dX`.
pub fn hdc_backward<T: Scalar>(
    level_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    cfg: &MsbConfig,
    grad_hdc: &FeatureMap<T>,
    grads: &mut MsbParams<T>,
) -> Result<FeatureMap<T>> {
    let b = cfg.hdc.branch_channels;
    let parts = split_channels(grad_hdc, &[b, b, b, b])?;
    let mut grad_in = FeatureMap::zeros(level_map.shape());
    for (&r, g) in cfg.hdc.dilation_rates.iter().zip(&parts) {
        let cg = conv2d_backward(level_map, &params.shared_filter, cfg.hdc_spec(r), g)?;
        add_filter(&mut grads.shared_filter, &cg.filter);
        grad_in.add_assign(&cg.input)?;
    }
    let cg = conv2d_backward(level_map, &params.mapping_filter, ConvSpec::default(), &parts[3])?;
    add_filter(&mut grads.mapping_filter, &cg.filter);
    grad_in.add_assign(&cg.input)?;
    Ok(grad_in)
}

fn activate<T: Scalar>(pre: &FeatureMap<T>, act: GateActivation) -> FeatureMap<T> {
    match act {
        GateActivation::Sigmoid => sigmoid(pre),
        GateActivation::Identity => pre.clone(),
    }
}

fn activate_backward<T: Scalar>(
    gate: &FeatureMap<T>,
    grad: &FeatureMap<T>,
    act: GateActivation,
) -> Result<FeatureMap<T>> {
    match act {
        GateActivation::Sigmoid => sigmoid_backward(gate, grad),
        GateActivation::Identity => Ok(grad.clone()),
    }
}

/// `F_ch(H) = σ(avgpool(H) * W1x1)`, shape `(N, 4C, 1, 1)`.
pub fn channel_attention_gate<T: Scalar>(
    hdc_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    act: GateActivation,
) -> Result<FeatureMap<T>> {
    if hdc_map.channels() != params.channel_attn_filter.in_channels {
        return Err(Error::shape(format!(
            "HDC map has {} channels, channel attention expects {}",
            hdc_map.channels(),
            params.channel_attn_filter.in_channels
        )));
    }
    let pooled = global_avg_pool(hdc_map);
    let pre = conv2d(&pooled, &params.channel_attn_filter, ConvSpec::default())?;
    Ok(activate(&pre, act))
}

/// `Hch = F_ch ⊗ H`.
pub fn apply_channel_attention<T: Scalar>(
    hdc_map: &FeatureMap<T>,
    gate: &FeatureMap<T>,
) -> Result<FeatureMap<T>> {
    if gate_kind(hdc_map.shape(), gate.shape())? != GateKind::Channel {
        return Err(Error::shape(format!(
            "channel gate must be (N, C, 1, 1), got {}",
            gate.shape()
        )));
    }
    broadcast_mul(hdc_map, gate)
}

/// `F_sp(Hch) = σ(maxpool_c(Hch) * W3x3)`, shape `(N, 1, H, W)`.
pub fn spatial_attention_gate<T: Scalar>(
    ch_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    act: GateActivation,
) -> Result<FeatureMap<T>> {
    let f = &params.spatial_attn_filter;
    if f.in_channels != 1 || f.out_channels != 1 {
        return Err(Error::shape("spatial attention filter must map 1 channel to 1"));
    }
    let pooled = channel_max_pool(ch_map);
    let pre = conv2d(&pooled, f, ConvSpec::same(f.kernel_h, 1))?;
    Ok(activate(&pre, act))
}

/// Retained forward state of one booster.
#[derive(Clone, Debug)]
pub struct MsbCache<T> {
    input: FeatureMap<T>,
    hdc: FeatureMap<T>,
    pooled_avg: Option<FeatureMap<T>>,
    channel_gate: Option<FeatureMap<T>>,
    ch_map: FeatureMap<T>,
    pooled_max: Option<FeatureMap<T>>,
    spatial_gate: Option<FeatureMap<T>>,
}

impl<T: Scalar> MsbCache<T> {
    pub fn hdc(&self) -> &FeatureMap<T> {
        &self.hdc
    }

    pub fn channel_gate(&self) -> Option<&FeatureMap<T>> {
        self.channel_gate.as_ref()
    }

    pub fn spatial_gate(&self) -> Option<&FeatureMap<T>> {
        self.spatial_gate.as_ref()
    }

    pub fn channel_attended(&self) -> &FeatureMap<T> {
        &self.ch_map
    }
}

/// `P̂` for one level map.
pub fn msb_forward<T: Scalar>(
    level_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    cfg: &MsbConfig,
) -> Result<FeatureMap<T>> {
    msb_forward_with_cache(level_map, params, cfg).map(|(out, _)| out)
}

pub fn msb_forward_with_cache<T: Scalar>(
    level_map: &FeatureMap<T>,
    params: &MsbParams<T>,
    cfg: &MsbConfig,
) -> Result<(FeatureMap<T>, MsbCache<T>)> {
    params.validate(cfg)?;
    let hdc = hdc_forward(level_map, params, cfg)?;

    let (pooled_avg, channel_gate, ch_map) = if cfg.channel_attention {
        let pooled = global_avg_pool(&hdc);
        let pre = conv2d(&pooled, &params.channel_attn_filter, ConvSpec::default())?;
        let gate = activate(&pre, cfg.gate);
        let ch = apply_channel_attention(&hdc, &gate)?;
        (Some(pooled), Some(gate), ch)
    } else {
        (None, None, hdc.clone())
    };

    let (pooled_max, spatial_gate, out) = if cfg.spatial_attention {
        let pooled = channel_max_pool(&ch_map);
        let f = &params.spatial_attn_filter;
        let pre = conv2d(&pooled, f, ConvSpec::same(f.kernel_h, 1))?;
        let gate = activate(&pre, cfg.gate);
        let gated = broadcast_mul(&ch_map, &gate)?;
        let out = match cfg.output {
            MsbOutput::Multiplicative => gated,
            MsbOutput::Residual => elementwise_add(&gated, &ch_map)?,
        };
        (Some(pooled), Some(gate), out)
    } else {
        (None, None, ch_map.clone())
    };

    let cache = MsbCache {
        input: level_map.clone(),
        hdc,
        pooled_avg,
        channel_gate,
        ch_map,
        pooled_max,
        spatial_gate,
    };
    Ok((out, cache))
}

/// Accumulates booster parameter gradients and returns `dL/dX`.
pub fn msb_backward<T: Scalar>(
    params: &MsbParams<T>,
    cfg: &MsbConfig,
    cache: &MsbCache<T>,
    grad_out: &FeatureMap<T>,
    grads: &mut MsbParams<T>,
) -> Result<FeatureMap<T>> {
    let grad_ch = match (&cache.pooled_max, &cache.spatial_gate) {
        (Some(pooled), Some(gate)) => {
            let (mut g_ch, g_gate) = broadcast_mul_backward(&cache.ch_map, gate, grad_out)?;
            if cfg.output == MsbOutput::Residual {
                g_ch.add_assign(grad_out)?;
            }
            let g_pre = activate_backward(gate, &g_gate, cfg.gate)?;
            let f = &params.spatial_attn_filter;
            let cg = conv2d_backward(pooled, f, ConvSpec::same(f.kernel_h, 1), &g_pre)?;
            add_filter(&mut grads.spatial_attn_filter, &cg.filter);
            g_ch.add_assign(&channel_max_pool_backward(&cache.ch_map, &cg.input)?)?;
            g_ch
        }
        _ => grad_out.clone(),
    };

    let grad_hdc = match (&cache.pooled_avg, &cache.channel_gate) {
        (Some(pooled), Some(gate)) => {
            let (mut g_h, g_gate) = broadcast_mul_backward(&cache.hdc, gate, &grad_ch)?;
            let g_pre = activate_backward(gate, &g_gate, cfg.gate)?;
            let cg = conv2d_backward(pooled, &params.channel_attn_filter, ConvSpec::default(), &g_pre)?;
            add_filter(&mut grads.channel_attn_filter, &cg.filter);
            g_h.add_assign(&global_avg_pool_backward(cache.hdc.shape(), &cg.input)?)?;
            g_h
        }
        _ => grad_ch,
    };

    hdc_backward(&cache.input, params, cfg, &grad_hdc, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(b: usize) -> MsbConfig {
        MsbConfig {
            hdc: HdcConfig {
                branch_channels: b,
                ..HdcConfig::default()
            },
            ..MsbConfig::default()
        }
    }

    #[test]
    fn center_tap_hdc_replicates_input() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = MsbParams::<f64>::init(2, &c, &mut rng).unwrap();
        p.shared_filter = Filter::center_identity(2, 3);
        p.mapping_filter = Filter::center_identity(2, 1);
        let x = FeatureMap::random_normal(Shape::new(1, 2, 6, 5), 1.0, &mut rng);
        let h = hdc_forward(&x, &p, &c).unwrap();
        assert_eq!(h, concat_channels(&[&x, &x, &x, &x]).unwrap());
    }

    #[test]
    fn constant_field_interior_is_nine_c() {
        let c = cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = MsbParams::<f64>::init(1, &c, &mut rng).unwrap();
        p.shared_filter = Filter::new(1, 1, 3, 3, vec![1.0; 9], Some(vec![0.0])).unwrap();
        let x = FeatureMap::full(Shape::new(1, 1, 12, 12), 0.7);
        let h = hdc_forward(&x, &p, &c).unwrap();
        for (k, r) in [1usize, 2, 3].into_iter().enumerate() {
            for y in r..12 - r {
                for xx in r..12 - r {
                    assert!((h.at(0, k, y, xx) - 6.3).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_attention_filters_give_quarter_hdc() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut p = MsbParams::<f64>::init(3, &c, &mut rng).unwrap();
        p.channel_attn_filter = p.channel_attn_filter.zeros_like();
        p.spatial_attn_filter = p.spatial_attn_filter.zeros_like();
        let x = FeatureMap::random_normal(Shape::new(2, 3, 5, 5), 1.0, &mut rng);
        let (out, cache) = msb_forward_with_cache(&x, &p, &c).unwrap();
        assert!(out.max_abs_diff(&cache.hdc().scale(0.25)).unwrap() < 1e-15);
        assert!(cache.channel_gate().unwrap().as_slice().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn zero_input_zero_output() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = MsbParams::<f64>::init(3, &c, &mut rng).unwrap();
        let out = msb_forward(&FeatureMap::zeros(Shape::new(1, 3, 4, 4)), &p, &c).unwrap();
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn bad_rates_rejected() {
        for rates in [vec![1, 2], vec![2, 2, 3], vec![0, 1, 2], vec![1, 2, 3, 4]] {
            let c = MsbConfig {
                hdc: HdcConfig {
                    dilation_rates: rates,
                    ..HdcConfig::default()
                },
                ..MsbConfig::default()
            };
            assert!(matches!(c.hdc.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn channel_mismatch_rejected() {
        let c = cfg(2);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = MsbParams::<f64>::init(3, &c, &mut rng).unwrap();
        let x = FeatureMap::zeros(Shape::new(1, 4, 4, 4));
        assert!(matches!(hdc_forward(&x, &p, &c), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gate_filters_give_half_gates() {
        let c = cfg(1);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mut p = MsbParams::<f64>::init(2, &c, &mut rng).unwrap();
        p.channel_attn_filter = p.channel_attn_filter.zeros_like();
        p.spatial_attn_filter = p.spatial_attn_filter.zeros_like();
        let h = FeatureMap::random_normal(Shape::new(1, 4, 3, 3), 2.0, &mut rng);
        let g = channel_attention_gate(&h, &p, GateActivation::Sigmoid).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.5));
        let s = spatial_attention_gate(&h, &p, GateActivation::Sigmoid).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 1, 3, 3));
        assert!(s.as_slice().iter().all(|&v| v == 0.5));
    }
}
