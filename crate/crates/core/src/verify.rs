//! Finite-difference verification of every differentiable operation and of
//! the composed pipelines, as run by `msb gradcheck`.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{ModelConfig, ModelVariant, Precision, VerifyConfig};
use crate::detection::{
    assign_targets, detection_loss, head_backward, head_forward, sample_anchors, AnchorLabel,
    Assignment, BoundingBox, BoxDeltas, HeadConfig, HeadOutput, HeadParams, LossConfig,
};
use crate::fpn::{fpn_backward, fpn_forward, BackboneConfig, FpnParams};
use crate::model::Detector;
use crate::msb::{
    hdc_backward, hdc_forward, msb_backward, msb_forward, msb_forward_with_cache, GateActivation,
    MsbConfig, MsbOutput, MsbParams,
};
use crate::params::Parameters;
use crate::tensor::gradcheck::{finite_difference_check_with_floor, numerical_gradient, RELATIVE_ERROR_FLOOR};
use crate::tensor::*;
use crate::{Error, Result, Scalar};

/// Deliberate corruption of an analytic gradient, for exercising the
/// failure path of the suite.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    Conv2dBackward,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv2d" => Ok(Fault::Conv2dBackward),
            other => Err(Error::Parse(format!("unknown fault `{other}` (known: conv2d)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub precision: Precision,
    pub epsilon: f64,
    pub warnings: Vec<String>,
    pub results: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.results.iter().filter(|r| !r.passed).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let width = self.results.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>9}  {:>7}  status",
            "check", "max rel err", "tolerance", "params"
        );
        for r in &self.results {
            let _ = writeln!(
                s,
                "{:<width$}  {:>12.3e}  {:>9.1e}  {:>7}  {}",
                r.name,
                r.max_relative_error,
                r.tolerance,
                r.checked,
                if r.passed { "ok" } else { "FAIL" }
            );
        }
        s
    }
}

struct Ctx {
    eps: f64,
    floor: f64,
    normwise: bool,
    op_tol: f64,
    pipe_tol: f64,
    fault: Option<Fault>,
    results: Vec<CheckResult>,
}

impl Ctx {
    fn record<T: Scalar>(
        &mut self,
        name: impl Into<String>,
        pipeline: bool,
        params: &[T],
        analytic: &[T],
        loss: impl FnMut(&[T]) -> T,
    ) -> Result<()> {
        let tolerance = if pipeline { self.pipe_tol } else { self.op_tol };
        let err = if self.normwise {
            normwise_error(loss, params, analytic, T::of(self.eps))?
        } else {
            finite_difference_check_with_floor(loss, params, analytic, T::of(self.eps), self.floor)?
                .max_relative_error
        };
        self.results.push(CheckResult {
            name: name.into(),
            max_relative_error: err,
            tolerance,
            checked: params.len(),
            passed: err < tolerance,
        });
        Ok(())
    }
}

/// Adds small noise to every parameter. Freshly initialised biases are
/// zero, which puts dead-ReLU pixels exactly on max-pool ties.
fn jitter<T: Scalar, P: Parameters<T>>(p: &mut P, r: &mut ChaCha8Rng) {
    use rand_distr::{Distribution, Normal};
    let normal = Normal::new(0.0, 0.05).expect("valid std");
    p.visit_mut("", &mut |_, _, v| {
        for x in v.iter_mut() {
            *x += T::of(normal.sample(r));
        }
    });
}

/// `|a - n|_2 / max(|a|_2, |n|_2)` over the whole gradient.
fn normwise_error<T: Scalar>(loss: impl FnMut(&[T]) -> T, params: &[T], analytic: &[T], eps: T) -> Result<f64> {
    let numeric = numerical_gradient(loss, params, eps)?;
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(&numeric).map(|(a, n)| a.to_f64_lossy() - n.to_f64_lossy()));
    let a = norm(&mut analytic.iter().map(|a| a.to_f64_lossy()));
    let n = norm(&mut numeric.iter().map(|n| n.to_f64_lossy()));
    Ok(diff / a.max(n).max(RELATIVE_ERROR_FLOOR))
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn randn<T: Scalar>(shape: Shape, r: &mut ChaCha8Rng) -> FeatureMap<T> {
    FeatureMap::random_normal(shape, 1.0, r)
}

fn dims(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

/// Splits a flat vector back into a map of `shape` and the remainder.
fn take<T: Scalar>(flat: &[T], shape: Shape) -> (FeatureMap<T>, &[T]) {
    let n = shape.len();
    (
        FeatureMap::new(shape, flat[..n].to_vec()).expect("length matches"),
        &flat[n..],
    )
}

fn cat<T: Scalar>(parts: &[&[T]]) -> Vec<T> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

fn check_conv<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    let mut stream = 0;
    for stride in [1, 2] {
        for dilation in [1, 2, 3] {
            stream += 1;
            let mut r = rng(seed, stream);
            let x: FeatureMap<T> = randn(dims(2, 2, 7, 6), &mut r);
            let f = Filter::<T>::random_normal(3, 2, 3, 0.5, &mut r);
            let spec = ConvSpec::new(dilation, stride, dilation)?;
            let y = conv2d(&x, &f, spec)?;
            let proj: FeatureMap<T> = randn(y.shape(), &mut r);
            let g = conv2d_backward(&x, &f, spec, &proj)?;
            let mut gw = g.filter.flatten();
            if ctx.fault == Some(Fault::Conv2dBackward) {
                gw.iter_mut().for_each(|v| *v *= T::of(1.05));
            }
            let params = cat(&[x.as_slice(), &f.flatten()]);
            let analytic = cat(&[g.input.as_slice(), &gw]);
            let xs = x.shape();
            let mut probe = f.clone();
            ctx.record(format!("conv2d[r={dilation},s={stride}]"), false, &params, &analytic, |p| {
                let (xi, rest) = take(p, xs);
                probe.assign_flat(rest).expect("filter size");
                conv2d(&xi, &probe, spec).and_then(|y| y.dot(&proj)).expect("valid conv")
            })?;
        }
    }
    Ok(())
}

fn check_unary<T: Scalar>(
    ctx: &mut Ctx,
    name: &str,
    x: FeatureMap<T>,
    forward: impl Fn(&FeatureMap<T>) -> FeatureMap<T>,
    backward: impl Fn(&FeatureMap<T>, &FeatureMap<T>, &FeatureMap<T>) -> Result<FeatureMap<T>>,
    r: &mut ChaCha8Rng,
) -> Result<()> {
    let y = forward(&x);
    let proj: FeatureMap<T> = randn(y.shape(), r);
    let g = backward(&x, &y, &proj)?;
    let xs = x.shape();
    ctx.record(name, false, x.as_slice(), g.as_slice(), |p| {
        forward(&take(p, xs).0).dot(&proj).expect("same shape")
    })
}

fn check_pointwise_ops<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    let mut r = rng(seed, 100);
    let x = randn::<T>(dims(2, 3, 4, 5), &mut r);
    check_unary(ctx, "global_avg_pool", x, global_avg_pool, |x, _, g| global_avg_pool_backward(x.shape(), g), &mut r)?;
    let x = randn::<T>(dims(2, 4, 4, 3), &mut r);
    check_unary(ctx, "channel_max_pool", x, channel_max_pool, |x, _, g| channel_max_pool_backward(x, g), &mut r)?;
    let x = randn::<T>(dims(1, 2, 3, 4), &mut r);
    check_unary(ctx, "upsample_nearest2x", x, upsample_nearest2x, |x, _, g| upsample_nearest2x_backward(x.shape(), g), &mut r)?;
    let x = randn::<T>(dims(1, 3, 4, 4), &mut r);
    check_unary(ctx, "sigmoid", x, sigmoid, |_, y, g| sigmoid_backward(y, g), &mut r)?;
    let x = randn::<T>(dims(1, 3, 4, 4), &mut r);
    check_unary(ctx, "relu", x, relu, |x, _, g| relu_backward(x, g), &mut r)?;

    // two-input ops
    let a = randn::<T>(dims(1, 2, 3, 3), &mut r);
    let b = randn::<T>(dims(1, 2, 3, 3), &mut r);
    let proj = randn::<T>(a.shape(), &mut r);
    let (ga, gb) = elementwise_add_backward(&proj);
    let s = a.shape();
    ctx.record(
        "elementwise_add",
        false,
        &cat(&[a.as_slice(), b.as_slice()]),
        &cat(&[ga.as_slice(), gb.as_slice()]),
        |p| {
            let (x, rest) = take(p, s);
            let (y, _) = take(rest, s);
            elementwise_add(&x, &y).and_then(|z| z.dot(&proj)).expect("same shape")
        },
    )?;

    let a = randn::<T>(dims(1, 2, 3, 3), &mut r);
    let b = randn::<T>(dims(1, 3, 3, 3), &mut r);
    let proj = randn::<T>(dims(1, 5, 3, 3), &mut r);
    let parts = split_channels(&proj, &[2, 3])?;
    let (sa, sb) = (a.shape(), b.shape());
    ctx.record(
        "concat_channels",
        false,
        &cat(&[a.as_slice(), b.as_slice()]),
        &cat(&[parts[0].as_slice(), parts[1].as_slice()]),
        |p| {
            let (x, rest) = take(p, sa);
            let (y, _) = take(rest, sb);
            concat_channels(&[&x, &y]).and_then(|z| z.dot(&proj)).expect("same shape")
        },
    )?;

    for (name, gate_shape) in [
        ("broadcast_mul[channel]", dims(2, 3, 1, 1)),
        ("broadcast_mul[spatial]", dims(2, 1, 4, 3)),
    ] {
        let x = randn::<T>(dims(2, 3, 4, 3), &mut r);
        let gate = randn::<T>(gate_shape, &mut r);
        let proj = randn::<T>(x.shape(), &mut r);
        let (gx, gg) = broadcast_mul_backward(&x, &gate, &proj)?;
        let xs = x.shape();
        ctx.record(
            name,
            false,
            &cat(&[x.as_slice(), gate.as_slice()]),
            &cat(&[gx.as_slice(), gg.as_slice()]),
            |p| {
                let (xi, rest) = take(p, xs);
                let (gi, _) = take(rest, gate_shape);
                broadcast_mul(&xi, &gi).and_then(|z| z.dot(&proj)).expect("valid gate")
            },
        )?;
    }
    Ok(())
}

fn small_msb(gate: GateActivation, output: MsbOutput, rates: [usize; 3]) -> MsbConfig {
    let mut cfg = MsbConfig {
        gate,
        output,
        ..MsbConfig::default()
    };
    cfg.hdc.branch_channels = 2;
    cfg.hdc.dilation_rates = rates.to_vec();
    cfg
}

fn check_msb<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    let mut r = rng(seed, 200);
    let cfg = small_msb(GateActivation::Sigmoid, MsbOutput::Multiplicative, [1, 2, 3]);
    let params = MsbParams::<T>::init(3, &cfg, &mut r)?;
    let x = randn::<T>(dims(1, 3, 7, 7), &mut r);
    let h = hdc_forward(&x, &params, &cfg)?;
    let proj = randn::<T>(h.shape(), &mut r);
    let mut grads = params.zeros_like();
    let gx = hdc_backward(&x, &params, &cfg, &proj, &mut grads)?;
    let hdc_flat = |p: &MsbParams<T>| cat(&[&p.shared_filter.flatten(), &p.mapping_filter.flatten()]);
    let xs = x.shape();
    let mut probe = params.clone();
    ctx.record(
        "hdc",
        false,
        &cat(&[x.as_slice(), &hdc_flat(&params)]),
        &cat(&[gx.as_slice(), &hdc_flat(&grads)]),
        |p| {
            let (xi, rest) = take(p, xs);
            let n = probe.shared_filter.parameter_count();
            probe.shared_filter.assign_flat(&rest[..n]).expect("size");
            probe.mapping_filter.assign_flat(&rest[n..]).expect("size");
            hdc_forward(&xi, &probe, &cfg).and_then(|y| y.dot(&proj)).expect("valid hdc")
        },
    )?;

    let variants = [
        ("msb", small_msb(GateActivation::Sigmoid, MsbOutput::Multiplicative, [1, 2, 3])),
        ("msb[residual]", small_msb(GateActivation::Sigmoid, MsbOutput::Residual, [1, 2, 3])),
        ("msb[identity-gate]", small_msb(GateActivation::Identity, MsbOutput::Multiplicative, [1, 2, 3])),
        ("msb[rates=1,2,5]", small_msb(GateActivation::Sigmoid, MsbOutput::Multiplicative, [1, 2, 5])),
    ];
    for (i, (name, cfg)) in variants.into_iter().enumerate() {
        let mut r = rng(seed, 210 + i as u64);
        let params = MsbParams::<T>::init(3, &cfg, &mut r)?;
        let x = randn::<T>(dims(1, 3, 8, 8), &mut r);
        let (y, cache) = msb_forward_with_cache(&x, &params, &cfg)?;
        let proj = randn::<T>(y.shape(), &mut r);
        let mut grads = params.zeros_like();
        let gx = msb_backward(&params, &cfg, &cache, &proj, &mut grads)?;
        let xs = x.shape();
        let mut probe = params.clone();
        ctx.record(
            name,
            true,
            &cat(&[x.as_slice(), &params.flatten()]),
            &cat(&[gx.as_slice(), &grads.flatten()]),
            |p| {
                let (xi, rest) = take(p, xs);
                probe.assign_flat(rest).expect("size");
                msb_forward(&xi, &probe, &cfg).and_then(|y| y.dot(&proj)).expect("valid msb")
            },
        )?;
    }
    Ok(())
}

fn check_fpn<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    for (i, smoothing) in [false, true].into_iter().enumerate() {
        let cfg = BackboneConfig {
            input_channels: 3,
            stem_channels: 3,
            stage_channels: vec![3, 4],
            num_levels: 2,
            pyramid_channels: 3,
            smoothing,
        };
        let mut r = rng(seed, 300 + i as u64);
        let mut params = FpnParams::<T>::init(&cfg, &mut r)?;
        jitter(&mut params, &mut r);
        let x = randn::<T>(dims(1, 3, 16, 16), &mut r);
        let (outs, cache) = fpn_forward(&x, &params, &cfg)?;
        let proj: Vec<FeatureMap<T>> = outs.iter().map(|o| randn(o.shape(), &mut r)).collect();
        let mut grads = params.zeros_like();
        fpn_backward(&params, &cache, &proj, &mut grads)?;
        let mut probe = params.clone();
        let name = if smoothing { "fpn[smoothing]" } else { "fpn" };
        ctx.record(name, true, &params.flatten(), &grads.flatten(), |p| {
            probe.assign_flat(p).expect("size");
            let (outs, _) = fpn_forward(&x, &probe, &cfg).expect("valid fpn");
            outs.iter().zip(&proj).map(|(o, q)| o.dot(q).expect("shape")).fold(T::zero(), |a, b| a + b)
        })?;
    }
    Ok(())
}

fn random_assignments(n: usize, r: &mut ChaCha8Rng) -> (Vec<Assignment>, Vec<bool>) {
    use rand::Rng;
    let mut a = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    for i in 0..n {
        let label = match i % 3 {
            0 => AnchorLabel::Positive,
            1 => AnchorLabel::Negative,
            _ => AnchorLabel::Ignore,
        };
        let target = (label == AnchorLabel::Positive).then(|| {
            BoxDeltas::from_array([
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
                r.random_range(-0.5..0.5),
            ])
        });
        a.push(Assignment {
            label,
            gt_index: target.map(|_| 0),
            max_iou: 0.0,
            target,
        });
        s.push(label != AnchorLabel::Ignore && r.random_bool(0.8));
    }
    (a, s)
}

fn check_head_and_loss<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    let mut r = rng(seed, 400);
    let n = 24;
    let (assignments, sampled) = random_assignments(n, &mut r);
    let logits = randn::<T>(dims(1, 1, 1, n), &mut r).into_vec();
    let deltas = randn::<T>(dims(1, 1, 4, n), &mut r).into_vec();
    let cfg = LossConfig::default();
    let l = detection_loss(&logits, &deltas, &assignments, &sampled, &cfg)?;
    ctx.record(
        "detection_loss",
        false,
        &cat(&[&logits, &deltas]),
        &cat(&[&l.grad_logits, &l.grad_deltas]),
        |p| detection_loss(&p[..n], &p[n..], &assignments, &sampled, &cfg).expect("aligned").total,
    )?;

    let mut r = rng(seed, 401);
    let params = HeadParams::<T>::init(3, 3, &HeadConfig { hidden_channels: 4 }, &mut r)?;
    let levels = vec![randn::<T>(dims(1, 3, 6, 6), &mut r), randn::<T>(dims(1, 3, 3, 3), &mut r)];
    let (out, cache) = head_forward(&levels, &params)?;
    let proj = HeadOutput {
        logits: out.logits.iter().map(|m| randn(m.shape(), &mut r)).collect(),
        deltas: out.deltas.iter().map(|m| randn(m.shape(), &mut r)).collect(),
    };
    let mut grads = params.zeros_like();
    let glevels = head_backward(&params, &cache, &proj, &mut grads)?;
    let shapes: Vec<Shape> = levels.iter().map(|l| l.shape()).collect();
    let mut probe = params.clone();
    let gl: Vec<&[T]> = glevels.iter().map(|g| g.as_slice()).collect();
    let xl: Vec<&[T]> = levels.iter().map(|g| g.as_slice()).collect();
    let pf = params.flatten();
    let gf = grads.flatten();
    ctx.record(
        "head",
        false,
        &cat(&[xl[0], xl[1], &pf]),
        &cat(&[gl[0], gl[1], &gf]),
        |p| {
            let (a, rest) = take(p, shapes[0]);
            let (b, rest) = take(rest, shapes[1]);
            probe.assign_flat(rest).expect("size");
            let (o, _) = head_forward(&[a, b], &probe).expect("valid head");
            let dot = |x: &[FeatureMap<T>], y: &[FeatureMap<T>]| {
                x.iter().zip(y).map(|(m, q)| m.dot(q).expect("shape")).fold(T::zero(), |s, v| s + v)
            };
            dot(&o.logits, &proj.logits) + dot(&o.deltas, &proj.deltas)
        },
    )
}

/// Smallest detector configuration used by the end-to-end check.
pub fn tiny_model(variant: ModelVariant) -> ModelConfig {
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

fn check_detector<T: Scalar>(ctx: &mut Ctx, seed: u64) -> Result<()> {
    for (i, variant) in [ModelVariant::FpnMsb, ModelVariant::Fpn].into_iter().enumerate() {
        let mut det = Detector::<T>::new(tiny_model(variant), seed.wrapping_add(i as u64))?;
        let mut r = rng(seed, 500 + i as u64);
        jitter(&mut det, &mut r);
        let image = randn::<T>(dims(1, 3, 32, 32), &mut r);
        let anchors = det.anchors(32, 32)?;
        let gts = [
            BoundingBox::new(4.0, 6.0, 14.0, 13.0)?,
            BoundingBox::new(17.0, 15.0, 31.0, 30.0)?,
        ];
        let assignments = assign_targets(&anchors, &gts, &Default::default())?;
        let loss_cfg = LossConfig {
            batch_per_image: 64,
            ..LossConfig::default()
        };
        let sampled = sample_anchors(&assignments, &loss_cfg, &mut r);
        let (_, grads) = det.loss_and_gradient(&image, &assignments, &sampled, &loss_cfg)?;
        let mut probe = det.clone();
        let name = format!("pipeline[{}+head+loss]", variant.name());
        ctx.record(name, true, &det.flatten(), &grads.flatten(), |p| {
            probe.assign_flat(p).expect("size");
            probe.loss(&image, &assignments, &sampled, &loss_cfg).expect("valid pipeline")
        })?;
    }
    Ok(())
}

/// Step and tolerances actually applied.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveSettings {
    pub epsilon: f64,
    pub op_tolerance: f64,
    pub pipeline_tolerance: f64,
    /// Compare whole gradient vectors instead of the worst coordinate.
    pub normwise: bool,
    pub warning: Option<String>,
}

/// Single precision cannot meet the double-precision bounds: rounding noise
/// of order `1e-7 |L| / eps` swamps small gradient entries. It is checked with
/// a larger step, a norm-wise error and relaxed tolerances instead.
pub fn effective_settings(cfg: &VerifyConfig) -> EffectiveSettings {
    match cfg.precision {
        Precision::F64 => EffectiveSettings {
            epsilon: cfg.epsilon,
            op_tolerance: cfg.op_tolerance,
            pipeline_tolerance: cfg.pipeline_tolerance,
            normwise: false,
            warning: None,
        },
        Precision::F32 => {
            let epsilon = cfg.epsilon.max(1e-3);
            let op_tolerance = cfg.op_tolerance.max(1e-2);
            let pipeline_tolerance = cfg.pipeline_tolerance.max(5e-2);
            let warning = format!(
                "32-bit verification precision: using epsilon {epsilon:e}, norm-wise relative error and \
                 relaxed tolerances {op_tolerance:e} (ops) / {pipeline_tolerance:e} (pipelines)"
            );
            EffectiveSettings {
                epsilon,
                op_tolerance,
                pipeline_tolerance,
                normwise: true,
                warning: Some(warning),
            }
        }
    }
}

fn run_typed<T: Scalar>(cfg: &VerifyConfig, seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let eff = effective_settings(cfg);
    let mut ctx = Ctx {
        eps: eff.epsilon,
        floor: RELATIVE_ERROR_FLOOR,
        normwise: eff.normwise,
        op_tol: eff.op_tolerance,
        pipe_tol: eff.pipeline_tolerance,
        fault,
        results: Vec::new(),
    };
    check_conv::<T>(&mut ctx, seed)?;
    check_pointwise_ops::<T>(&mut ctx, seed)?;
    check_msb::<T>(&mut ctx, seed)?;
    check_fpn::<T>(&mut ctx, seed)?;
    check_head_and_loss::<T>(&mut ctx, seed)?;
    check_detector::<T>(&mut ctx, seed)?;
    Ok(SuiteReport {
        precision: cfg.precision,
        epsilon: eff.epsilon,
        warnings: eff.warning.into_iter().collect(),
        results: ctx.results,
    })
}

/// Runs every check at the configured precision. Probe points derive from
/// `cfg.seed`; the default seed keeps every ReLU and max-pool input farther
/// than `epsilon` from its kink.
pub fn run_gradcheck_suite(cfg: &VerifyConfig, fault: Option<Fault>) -> Result<SuiteReport> {
    let seed = cfg.seed;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::config("verify.epsilon must be positive"));
    }
    match cfg.precision {
        Precision::F64 => run_typed::<f64>(cfg, seed, fault),
        Precision::F32 => run_typed::<f32>(cfg, seed, fault),
    }
}
