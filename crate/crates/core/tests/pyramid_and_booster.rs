//! Pyramid and booster: composition oracles, weight sharing, structural
//! invariants and golden snapshots.
//!
//! Snapshots live in `tests/golden/`. Regenerate with
//! `MSB_BLESS_GOLDEN=1 cargo test -p msb-core --test pyramid_and_booster`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::PathBuf;

use msb_core::fpn::*;
use msb_core::msb::*;
use msb_core::params::Parameters;
use msb_core::tensor::gradcheck::finite_difference_check;
use msb_core::tensor::snapshot::{read_snapshot, write_snapshot};
use msb_core::tensor::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize_biases<R: Rng>(f: &mut Filter<f64>, g: &mut R) {
    f.bias = Some((0..f.out_channels).map(|_| g.random_range(-0.3..0.3)).collect());
}

fn booster(in_channels: usize, branch: usize, rates: [usize; 3], seed: u64) -> (MsbConfig, MsbParams<f64>) {
    let cfg = MsbConfig {
        hdc: HdcConfig {
            dilation_rates: rates.to_vec(),
            kernel_size: 3,
            branch_channels: branch,
        },
        ..MsbConfig::default()
    };
    let mut g = rng(seed);
    let mut p = MsbParams::init(in_channels, &cfg, &mut g).unwrap();
    for f in [&mut p.shared_filter, &mut p.mapping_filter, &mut p.channel_attn_filter, &mut p.spatial_attn_filter] {
        randomize_biases(f, &mut g);
    }
    (cfg, p)
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// Compares against a stored snapshot, or records it when blessing.
fn check_golden(name: &str, maps: &[FeatureMap<f64>]) {
    let path = golden_path(name);
    if std::env::var_os("MSB_BLESS_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let mut out = BufWriter::new(File::create(&path).unwrap());
        for m in maps {
            write_snapshot(&mut out, m).unwrap();
        }
        return;
    }
    let mut input = BufReader::new(File::open(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display())));
    let mut stored = Vec::new();
    while let Some(m) = read_snapshot::<f64, _>(&mut input).unwrap() {
        stored.push(m);
    }
    assert_eq!(stored.len(), maps.len(), "{name}: snapshot count");
    for (k, (s, m)) in stored.iter().zip(maps).enumerate() {
        assert_eq!(s.shape(), m.shape(), "{name}[{k}]");
        let as_f32 = m.map(|v| v as f32 as f64);
        assert_eq!(s, &as_f32, "{name}[{k}] differs from the recorded snapshot");
    }
}

fn backbone_cfg() -> BackboneConfig {
    BackboneConfig {
        input_channels: 3,
        stem_channels: 4,
        stage_channels: vec![4, 6, 6],
        num_levels: 3,
        pyramid_channels: 5,
        smoothing: false,
    }
}

/// The bottom-up path composed from the direct-loop convolution.
fn bottom_up_direct(image: &FeatureMap<f64>, p: &FpnParams<f64>) -> Vec<FeatureMap<f64>> {
    let s2 = ConvSpec::new(1, 2, 1).unwrap();
    let mut x = relu(&conv2d_direct(image, &p.stem, s2).unwrap());
    let mut out = Vec::new();
    for (stage, lateral) in p.stages.iter().zip(&p.laterals) {
        x = relu(&conv2d_direct(&x, stage, s2).unwrap());
        out.push(conv2d_direct(&x, lateral, ConvSpec::default()).unwrap());
    }
    out
}

#[test]
fn bottom_up_matches_direct_path_and_golden() {
    let cfg = backbone_cfg();
    let mut g = rng(2024);
    let mut p = FpnParams::<f64>::init(&cfg, &mut g).unwrap();
    randomize_biases(&mut p.stem, &mut g);
    let image = FeatureMap::random_normal(Shape::new(1, 3, 32, 32), 1.0, &mut g);
    let fast = bottom_up(&image, &p, &cfg).unwrap();
    let direct = bottom_up_direct(&image, &p);
    let sizes: Vec<usize> = fast.iter().map(|m| m.height()).collect();
    assert_eq!(sizes, vec![8, 4, 2]);
    for (a, b) in fast.iter().zip(&direct) {
        assert!(a.max_abs_diff(b).unwrap() <= 1e-10);
    }
    check_golden("bottom_up.msbt", &direct);
}

#[test]
fn four_level_spatial_sizes() {
    let cfg = BackboneConfig {
        stage_channels: vec![4, 4, 4, 4],
        num_levels: 4,
        ..backbone_cfg()
    };
    let p = FpnParams::<f64>::init(&cfg, &mut rng(0)).unwrap();
    let image = FeatureMap::random_normal(Shape::new(1, 3, 64, 64), 1.0, &mut rng(1));
    let (out, _) = fpn_forward(&image, &p, &cfg).unwrap();
    let sizes: Vec<(usize, usize)> = out.iter().map(|m| (m.height(), m.width())).collect();
    assert_eq!(sizes, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
}

#[test]
fn two_level_fusion_matches_hand_composition() {
    let mut g = rng(8);
    let fine = FeatureMap::<f64>::random_normal(Shape::new(1, 3, 4, 6), 1.0, &mut g);
    let coarse = FeatureMap::<f64>::random_normal(Shape::new(1, 3, 2, 3), 1.0, &mut g);
    let pyr = top_down_fuse(vec![fine.clone(), coarse.clone()]).unwrap();
    let want_coarse = coarse.scale(2.0);
    let want_fine = FeatureMap::from_fn(fine.shape(), |n, c, y, x| fine.at(n, c, y, x) + coarse.at(n, c, y / 2, x / 2));
    assert!(pyr.levels[1].fused.max_abs_diff(&want_coarse).unwrap() <= 1e-12);
    assert!(pyr.levels[0].fused.max_abs_diff(&want_fine).unwrap() <= 1e-12);
}

#[test]
fn pyramid_is_bit_deterministic() {
    let cfg = backbone_cfg();
    let run = || {
        let mut g = rng(99);
        let p = FpnParams::<f64>::init(&cfg, &mut g).unwrap();
        let image = FeatureMap::random_normal(Shape::new(1, 3, 32, 32), 1.0, &mut g);
        fpn_forward(&image, &p, &cfg).unwrap().0
    };
    assert_eq!(run(), run());
}

/// The booster composed from direct-loop convolutions and scalar formulas.
fn msb_direct(x: &FeatureMap<f64>, p: &MsbParams<f64>, cfg: &MsbConfig) -> FeatureMap<f64> {
    let mut branches: Vec<FeatureMap<f64>> = cfg
        .hdc
        .dilation_rates
        .iter()
        .map(|&r| conv2d_direct(x, &p.shared_filter, ConvSpec::new(r, 1, r).unwrap()).unwrap())
        .collect();
    branches.push(conv2d_direct(x, &p.mapping_filter, ConvSpec::default()).unwrap());
    let h = concat_channels(&branches.iter().collect::<Vec<_>>()).unwrap();
    let (n, c, hh, ww) = (h.batch(), h.channels(), h.height(), h.width());
    let pooled = FeatureMap::from_fn(Shape::new(n, c, 1, 1), |b, ch, _, _| {
        let mut s = 0.0;
        for y in 0..hh {
            for xx in 0..ww {
                s += h.at(b, ch, y, xx);
            }
        }
        s / (hh * ww) as f64
    });
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let ch_gate = conv2d_direct(&pooled, &p.channel_attn_filter, ConvSpec::default()).unwrap().map(sig);
    let hch = FeatureMap::from_fn(h.shape(), |b, ch, y, xx| h.at(b, ch, y, xx) * ch_gate.at(b, ch, 0, 0));
    let maxed = FeatureMap::from_fn(Shape::new(n, 1, hh, ww), |b, _, y, xx| {
        (0..c).map(|ch| hch.at(b, ch, y, xx)).fold(f64::NEG_INFINITY, f64::max)
    });
    let sp_gate = conv2d_direct(&maxed, &p.spatial_attn_filter, ConvSpec::new(1, 1, 1).unwrap()).unwrap().map(sig);
    FeatureMap::from_fn(h.shape(), |b, ch, y, xx| hch.at(b, ch, y, xx) * sp_gate.at(b, 0, y, xx))
}

#[test]
fn booster_matches_direct_composition_and_golden() {
    let (cfg, p) = booster(4, 3, [1, 2, 3], 31);
    let x = FeatureMap::random_normal(Shape::new(1, 4, 9, 11), 1.0, &mut rng(32));
    let fast = msb_forward(&x, &p, &cfg).unwrap();
    let direct = msb_direct(&x, &p, &cfg);
    assert!(fast.max_abs_diff(&direct).unwrap() <= 1e-12);
    check_golden("msb.msbt", &[direct]);
}

#[test]
fn gates_match_composed_oracles() {
    let (cfg, p) = booster(3, 2, [1, 2, 3], 40);
    let x = FeatureMap::random_normal(Shape::new(2, 3, 6, 6), 1.0, &mut rng(41));
    let h = hdc_forward(&x, &p, &cfg).unwrap();
    let ch = channel_attention_gate(&h, &p, GateActivation::Sigmoid).unwrap();
    let want = sigmoid(&conv2d(&global_avg_pool(&h), &p.channel_attn_filter, ConvSpec::default()).unwrap());
    assert!(ch.max_abs_diff(&want).unwrap() <= 1e-12);
    let hch = apply_channel_attention(&h, &ch).unwrap();
    let sp = spatial_attention_gate(&hch, &p, GateActivation::Sigmoid).unwrap();
    let want = sigmoid(&conv2d(&channel_max_pool(&hch), &p.spatial_attn_filter, ConvSpec::same(3, 1)).unwrap());
    assert!(sp.max_abs_diff(&want).unwrap() <= 1e-12);
}

#[test]
fn hdc_branches_match_direct_dilated_convolution() {
    let (cfg, p) = booster(3, 2, [1, 2, 3], 50);
    let x = FeatureMap::random_normal(Shape::new(1, 3, 8, 8), 1.0, &mut rng(51));
    let h = hdc_forward(&x, &p, &cfg).unwrap();
    for (k, &r) in cfg.hdc.dilation_rates.iter().enumerate() {
        let branch = slice_channels(&h, 2 * k, 2).unwrap();
        let want = conv2d_direct(&x, &p.shared_filter, ConvSpec::new(r, 1, r).unwrap()).unwrap();
        assert!(branch.max_abs_diff(&want).unwrap() <= 1e-12, "rate {r}");
    }
}

#[test]
fn hdc_parameter_count_ignores_branch_count() {
    let counts: Vec<usize> = [[1, 2, 3], [1, 2, 5], [2, 4, 8]]
        .into_iter()
        .map(|rates| booster(6, 4, rates, 1).1.hdc_parameter_count())
        .collect();
    let (_, p) = booster(6, 4, [1, 2, 3], 1);
    let expected = p.shared_filter.parameter_count() + p.mapping_filter.parameter_count();
    assert_eq!(expected, 4 * 6 * 9 + 4 + 4 * 6 + 4);
    assert!(counts.iter().all(|&c| c == expected));
}

#[test]
fn shared_gradient_is_sum_of_untied_copies() {
    let (cfg, p) = booster(3, 4, [1, 2, 3], 60);
    let mut g = rng(61);
    let x = FeatureMap::random_normal(Shape::new(2, 3, 7, 7), 1.0, &mut g);
    let upstream = FeatureMap::random_normal(Shape::new(2, 16, 7, 7), 1.0, &mut g);

    let mut tied = p.zeros_like();
    hdc_backward(&x, &p, &cfg, &upstream, &mut tied).unwrap();

    // Three independent copies of the shared filter, one per rate.
    let parts = split_channels(&upstream, &[4, 4, 4, 4]).unwrap();
    let mut weights = vec![0.0; p.shared_filter.weights.len()];
    let mut bias = vec![0.0; p.shared_filter.out_channels];
    for (k, &r) in cfg.hdc.dilation_rates.iter().enumerate() {
        let copy = p.shared_filter.clone();
        let cg = conv2d_backward(&x, &copy, ConvSpec::new(r, 1, r).unwrap(), &parts[k]).unwrap();
        for (w, d) in weights.iter_mut().zip(&cg.filter.weights) {
            *w += d;
        }
        for (b, d) in bias.iter_mut().zip(cg.filter.bias.as_ref().unwrap()) {
            *b += d;
        }
    }
    for (a, b) in tied.shared_filter.weights.iter().zip(&weights) {
        assert!((a - b).abs() <= 1e-10);
    }
    for (a, b) in tied.shared_filter.bias.as_ref().unwrap().iter().zip(&bias) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn booster_gradient_passes_finite_differences() {
    let (cfg, p) = booster(3, 2, [1, 2, 3], 70);
    let x = FeatureMap::random_normal(Shape::new(1, 3, 6, 6), 1.0, &mut rng(71));
    let (out, cache) = msb_forward_with_cache(&x, &p, &cfg).unwrap();
    let mut grads = p.zeros_like();
    msb_backward(&p, &cfg, &cache, &FeatureMap::full(out.shape(), 1.0), &mut grads).unwrap();
    let mut probe = p.clone();
    let report = finite_difference_check(
        |flat| {
            probe.assign_flat(flat).unwrap();
            msb_forward(&x, &probe, &cfg).unwrap().sum()
        },
        &p.flatten(),
        &grads.flatten(),
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn conv_weight_gradient_on_five_by_five() {
    let mut g = rng(80);
    let x = FeatureMap::random_normal(Shape::new(1, 2, 5, 5), 1.0, &mut g);
    let mut f = Filter::random_normal(3, 2, 3, 0.5, &mut g);
    randomize_biases(&mut f, &mut g);
    let spec = ConvSpec::same(3, 1);
    let out = conv2d(&x, &f, spec).unwrap();
    let cg = conv2d_backward(&x, &f, spec, &FeatureMap::full(out.shape(), 1.0)).unwrap();
    let mut probe = f.clone();
    let report = finite_difference_check(
        |w| {
            probe.weights.copy_from_slice(w);
            conv2d(&x, &probe, spec).unwrap().sum()
        },
        &f.weights,
        &cg.filter.weights,
        1e-4,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-5, "{report:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn booster_shapes_and_gates(
        channels in 1usize..5,
        branch in 1usize..4,
        h in 3usize..12,
        w in 3usize..12,
        wide_rates in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let rates = if wide_rates { [1, 2, 5] } else { [1, 2, 3] };
        let (cfg, p) = booster(channels, branch, rates, seed);
        let x = FeatureMap::random_normal(Shape::new(1, channels, h, w), 1.0, &mut rng(seed ^ 1));
        let (out, cache) = msb_forward_with_cache(&x, &p, &cfg).unwrap();
        prop_assert_eq!(cache.hdc().channels(), 4 * branch);
        prop_assert_eq!((out.height(), out.width()), (h, w));
        for gate in [cache.channel_gate().unwrap(), cache.spatial_gate().unwrap()] {
            prop_assert!(gate.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn channel_gate_keeps_spatial_argmax(seed in any::<u64>()) {
        let (cfg, p) = booster(3, 2, [1, 2, 3], seed);
        let x = FeatureMap::random_normal(Shape::new(1, 3, 7, 7), 1.0, &mut rng(seed ^ 2));
        let (_, cache) = msb_forward_with_cache(&x, &p, &cfg).unwrap();
        let (h, hch) = (cache.hdc(), cache.channel_attended());
        let argmax = |m: &FeatureMap<f64>, c: usize| {
            let mut best = (0, 0);
            for y in 0..7 {
                for xx in 0..7 {
                    if m.at(0, c, y, xx).abs() > m.at(0, c, best.0, best.1).abs() {
                        best = (y, xx);
                    }
                }
            }
            best
        };
        for c in 0..h.channels() {
            prop_assert_eq!(argmax(h, c), argmax(hch, c));
        }
    }

    #[test]
    fn fusion_is_linear(a in -4.0f64..4.0, seed in any::<u64>()) {
        let mut g = rng(seed);
        let down: Vec<FeatureMap<f64>> = [8usize, 4, 2]
            .iter()
            .map(|&s| FeatureMap::random_normal(Shape::new(1, 2, s, s), 1.0, &mut g))
            .collect();
        let scaled: Vec<_> = down.iter().map(|m| m.scale(a)).collect();
        let base = top_down_fuse(down).unwrap();
        let fused = top_down_fuse(scaled).unwrap();
        for (l, s) in base.levels.iter().zip(&fused.levels) {
            prop_assert!(l.fused.scale(a).max_abs_diff(&s.fused).unwrap() <= 1e-12);
        }
    }
}
