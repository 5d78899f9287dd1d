//! Parameter and multiply-add accounting.

use c2d_core::complexity::{count_complexity, count_params};
use c2d_core::config::preset;
use c2d_core::layer::FfnKind;
use c2d_core::model::{Model, ModelConfig, UpsamplerKind};
use c2d_core::tensor::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hand-written parameter tally, one term per weight or bias tensor.
fn hand_count(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let hid = cfg.ffn_ratio * c;
    let enc = if cfg.hier_encoding { 2 } else { 0 };
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
    let lin = |i: usize, o: usize| i * o + o;
    let mut layer = lin(c + enc, c) + lin(c / 2, c) + 2 * c + 2 * c + lin(c, hid) + lin(hid, c);
    if cfg.pre_norm {
        layer += 2 * c;
    }
    if cfg.ffn == FfnKind::ConvFfn {
        layer += hid * cfg.ffn_kernel * cfg.ffn_kernel + hid;
    }
    let n_layers = cfg.windows.len();
    let mut block = n_layers * layer;
    if cfg.unet {
        block += (n_layers / 2) * conv(2 * c, c, 1);
    }
    if cfg.block_conv {
        block += conv(c, c, 3);
    }
    let head = match cfg.upsampler {
        UpsamplerKind::Discrete => conv(c, 3 * cfg.scale * cfg.scale, 3),
        UpsamplerKind::Continuous => lin(c + 4, c) + 4 * lin(c, c) + lin(c + 2, c) + lin(c, 3),
    };
    conv(3, c, 3) + cfg.blocks * block + conv(c, c, 3) + head
}

#[test]
fn toy_counts_match_hand_summation() {
    let base = ModelConfig {
        channels: 4,
        blocks: 2,
        windows: vec![2, 1, 1, 2],
        scale: 3,
        ..ModelConfig::default()
    };
    let variants = [
        base.clone(),
        ModelConfig {
            upsampler: UpsamplerKind::Discrete,
            ..base.clone()
        },
        ModelConfig {
            ffn: FfnKind::ConvFfn,
            ffn_kernel: 3,
            hier_encoding: false,
            ..base.clone()
        },
        ModelConfig {
            unet: false,
            block_conv: false,
            pre_norm: false,
            ..base.clone()
        },
    ];
    for cfg in variants {
        let want = hand_count(&cfg);
        assert_eq!(count_params(&cfg).unwrap(), want, "{cfg:?}");
        let m = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.params().num_scalars(), want);
        assert_eq!(count_complexity(&cfg, 12, 12, cfg.scale as f64).unwrap().params(), want);
    }
}

#[test]
fn full_presets_land_on_the_published_budgets() {
    for (name, params, flops) in [("swinir-c2d-x4", 775e3, 52.7e9), ("srformer-c2d-x4", 849e3, 57.0e9)] {
        let cfg = preset(name).unwrap().stage_model(2);
        let t = std::time::Instant::now();
        let r = count_complexity(&cfg, 720, 1280, 4.0).unwrap();
        assert!(t.elapsed().as_secs_f64() < 5.0);
        let (p, f) = (r.params() as f64, r.flops() as f64);
        assert!((p / params - 1.0).abs() <= 0.05, "{name}: {p} params");
        assert!((f / flops - 1.0).abs() <= 0.10, "{name}: {f} flops");
        assert_eq!(r.out_extents, (720, 1280));
        assert_eq!(r.lr_extents, (180, 320));
    }
}

#[test]
fn smaller_scales_cost_more_on_a_fixed_output() {
    let at = |s: usize| {
        let cfg = preset(&format!("swinir-c2d-x{s}")).unwrap().stage_model(2);
        count_complexity(&cfg, 720, 1280, s as f64).unwrap().flops()
    };
    assert!(at(2) > at(3) && at(3) > at(4));
}

proptest! {
    #[test]
    fn csc_cost_is_linear_in_window_area(n in 1usize..40, c in 1usize..8, windows in 1usize..4) {
        let tally = |rows: usize| {
            let mut g = Graph::new();
            let q = g.input(Tensor::zeros([windows, rows, c]));
            let v = g.input(Tensor::zeros([windows, rows, c]));
            g.csc(q, v).unwrap();
            g.macs()
        };
        let (one, two) = (tally(n), tally(2 * n));
        prop_assert!(two <= 2 * one);
        prop_assert_eq!(two, 2 * one);
    }
}
