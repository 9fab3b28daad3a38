//! Objectness/regression head shared across pyramid levels: a 3x3
//! convolution with ReLU, then sibling 1x1 convolutions producing `A`
//! logits and `4A` deltas per cell.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::fpn::add_filter;
use crate::params::{join, Parameters};
use crate::tensor::{conv2d, conv2d_backward, relu, relu_backward, ConvSpec, FeatureMap, Filter};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub hidden_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden_channels: 32 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub conv: Filter<T>,
    pub objectness: Filter<T>,
    pub deltas: Filter<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        anchors_per_cell: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.hidden_channels == 0 || anchors_per_cell == 0 || in_channels == 0 {
            return Err(Error::config("head channel counts must be >= 1"));
        }
        Ok(Self {
            conv: Filter::he_normal(cfg.hidden_channels, in_channels, 3, rng),
            objectness: Filter::random_normal(anchors_per_cell, cfg.hidden_channels, 1, 0.01, rng),
            deltas: Filter::random_normal(4 * anchors_per_cell, cfg.hidden_channels, 1, 0.01, rng),
        })
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.objectness.out_channels
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            conv: self.conv.zeros_like(),
            objectness: self.objectness.zeros_like(),
            deltas: self.deltas.zeros_like(),
        }
    }
}

impl<T: Scalar> Parameters<T> for HeadParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &[T])) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.objectness.visit(&join(prefix, "objectness"), f);
        self.deltas.visit(&join(prefix, "deltas"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, [usize; 4], &mut [T])) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.objectness.visit_mut(&join(prefix, "objectness"), f);
        self.deltas.visit_mut(&join(prefix, "deltas"), f);
    }
}

/// Raw head outputs for every level.
#[derive(Clone, Debug)]
pub struct HeadOutput<T> {
    /// `(N, A, H, W)` per level.
    pub logits: Vec<FeatureMap<T>>,
    /// `(N, 4A, H, W)` per level; channel `4a + k` is coordinate `k` of anchor `a`.
    pub deltas: Vec<FeatureMap<T>>,
}

impl<T: Scalar> HeadOutput<T> {
    /// Logits of batch item `n` in anchor order (level, row, column, anchor).
    pub fn flat_logits(&self, n: usize) -> Vec<T> {
        let mut out = Vec::new();
        for m in &self.logits {
            let a = m.channels();
            for y in 0..m.height() {
                for x in 0..m.width() {
                    out.extend((0..a).map(|k| m.at(n, k, y, x)));
                }
            }
        }
        out
    }

    /// Deltas of batch item `n`, four per anchor, in anchor order.
    pub fn flat_deltas(&self, n: usize) -> Vec<T> {
        let mut out = Vec::new();
        for m in &self.deltas {
            for y in 0..m.height() {
                for x in 0..m.width() {
                    out.extend((0..m.channels()).map(|k| m.at(n, k, y, x)));
                }
            }
        }
        out
    }

    /// Scatters flat per-anchor gradients of batch item `n` back to map layout.
    pub fn unflatten_into(
        &self,
        n: usize,
        flat_logits: &[T],
        flat_deltas: &[T],
        grad: &mut HeadOutput<T>,
    ) -> Result<()> {
        let mut i = 0;
        for m in grad.logits.iter_mut() {
            let a = m.channels();
            for y in 0..m.height() {
                for x in 0..m.width() {
                    for k in 0..a {
                        let v = *flat_logits
                            .get(i)
                            .ok_or_else(|| Error::shape("too few logit gradients"))?;
                        m.set(n, k, y, x, v);
                        i += 1;
                    }
                }
            }
        }
        let mut j = 0;
        for m in grad.deltas.iter_mut() {
            for y in 0..m.height() {
                for x in 0..m.width() {
                    for k in 0..m.channels() {
                        let v = *flat_deltas
                            .get(j)
                            .ok_or_else(|| Error::shape("too few delta gradients"))?;
                        m.set(n, k, y, x, v);
                        j += 1;
                    }
                }
            }
        }
        if i != flat_logits.len() || j != flat_deltas.len() {
            return Err(Error::shape("gradient length does not match the anchor count"));
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            logits: self.logits.iter().map(|m| FeatureMap::zeros(m.shape())).collect(),
            deltas: self.deltas.iter().map(|m| FeatureMap::zeros(m.shape())).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    inputs: Vec<FeatureMap<T>>,
    hidden_pre: Vec<FeatureMap<T>>,
    hidden: Vec<FeatureMap<T>>,
}

pub fn head_forward<T: Scalar>(
    levels: &[FeatureMap<T>],
    params: &HeadParams<T>,
) -> Result<(HeadOutput<T>, HeadCache<T>)> {
    let mut out = HeadOutput {
        logits: Vec::with_capacity(levels.len()),
        deltas: Vec::with_capacity(levels.len()),
    };
    let mut cache = HeadCache {
        inputs: levels.to_vec(),
        hidden_pre: Vec::with_capacity(levels.len()),
        hidden: Vec::with_capacity(levels.len()),
    };
    for x in levels {
        let pre = conv2d(x, &params.conv, ConvSpec::same(3, 1))?;
        let h = relu(&pre);
        out.logits.push(conv2d(&h, &params.objectness, ConvSpec::default())?);
        out.deltas.push(conv2d(&h, &params.deltas, ConvSpec::default())?);
        cache.hidden_pre.push(pre);
        cache.hidden.push(h);
    }
    Ok((out, cache))
}

/// Accumulates head gradients; returns `dL/d level map` per level.
pub fn head_backward<T: Scalar>(
    params: &HeadParams<T>,
    cache: &HeadCache<T>,
    grad: &HeadOutput<T>,
    grads: &mut HeadParams<T>,
) -> Result<Vec<FeatureMap<T>>> {
    let mut out = Vec::with_capacity(cache.inputs.len());
    for (l, x) in cache.inputs.iter().enumerate() {
        let h = &cache.hidden[l];
        let go = conv2d_backward(h, &params.objectness, ConvSpec::default(), &grad.logits[l])?;
        let gd = conv2d_backward(h, &params.deltas, ConvSpec::default(), &grad.deltas[l])?;
        add_filter(&mut grads.objectness, &go.filter);
        add_filter(&mut grads.deltas, &gd.filter);
        let mut gh = go.input;
        gh.add_assign(&gd.input)?;
        let gpre = relu_backward(&cache.hidden_pre[l], &gh)?;
        let gc = conv2d_backward(x, &params.conv, ConvSpec::same(3, 1), &gpre)?;
        add_filter(&mut grads.conv, &gc.filter);
        out.push(gc.input);
    }
    Ok(out)
}
