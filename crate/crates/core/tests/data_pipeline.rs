//! Bicubic resizing against a direct two-dimensional kernel sum, sampling
//! statistics and augmentation bookkeeping.

use c2d_core::data::{
    bicubic_resize, cubic, sample_stage1, sample_stage1_batch, sample_stage2, synth_image, Augment, ImageBuffer, ResizeDirection,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Keys kernel written out independently of the library.
fn keys(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

/// Normalized taps of output sample `i` when resampling `n_in → n_out`.
fn taps(i: usize, n_in: usize, n_out: usize) -> Vec<(usize, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    let stretch = ratio.max(1.0);
    let center = (i as f64 + 0.5) * ratio - 0.5;
    let reach = (2.0 * stretch).ceil() as isize + 1;
    let c = center.floor() as isize;
    let raw: Vec<(usize, f64)> = (c - reach..=c + reach)
        .map(|j| (j.clamp(0, n_in as isize - 1) as usize, keys((j as f64 - center) / stretch)))
        .collect();
    let sum: f64 = raw.iter().map(|t| t.1).sum();
    raw.into_iter().map(|(j, w)| (j, w / sum)).collect()
}

/// Direct double sum over the 2-D kernel.
fn resize_oracle(img: &ImageBuffer, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow * 3);
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..3 {
                let mut acc = 0.0;
                for &(sy, wy) in &taps(y, img.height(), oh) {
                    for &(sx, wx) in &taps(x, img.width(), ow) {
                        acc += wy * wx * img.pixel(sy, sx)[c] as f64;
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

fn ramp(h: usize, w: usize) -> ImageBuffer {
    let data = (0..h * w)
        .flat_map(|i| {
            let (y, x) = ((i / w) as f32, (i % w) as f32);
            [0.2 + 0.05 * x, 0.2 + 0.05 * y, 0.3 + 0.02 * (x + y)]
        })
        .collect();
    ImageBuffer::new(h, w, data).unwrap()
}

#[test]
fn library_kernel_agrees_with_keys() {
    for k in -250..=250 {
        let x = k as f64 / 100.0;
        assert!((cubic(x) - keys(x)).abs() < 1e-12, "{x}");
    }
}

#[test]
fn eight_by_eight_ramp_matches_direct_kernel_sum() {
    let img = ramp(8, 8);
    for (s, dir, oh) in [
        (2.0, ResizeDirection::Up, 16),
        (3.0, ResizeDirection::Up, 24),
        (2.0, ResizeDirection::Down, 4),
        (3.0, ResizeDirection::Down, 3),
    ] {
        let got = bicubic_resize(&img, s, dir).unwrap();
        assert_eq!((got.height(), got.width()), (oh, oh));
        let want = resize_oracle(&img, oh, oh);
        for (a, b) in got.data().iter().zip(&want) {
            assert!((*a as f64 - b).abs() < 1e-6, "x{s} {dir:?}: {a} vs {b}");
        }
    }
}

#[test]
fn upscaling_reproduces_a_linear_ramp_away_from_edges() {
    let img = ramp(8, 8);
    let up = bicubic_resize(&img, 2.0, ResizeDirection::Up).unwrap();
    for y in 4..12 {
        for x in 4..12 {
            // output centre (x + 0.5)/2 - 0.5 in source pixels
            let sx = (x as f64 + 0.5) / 2.0 - 0.5;
            let want = 0.2 + 0.05 * sx;
            assert!((up.pixel(y, x)[0] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn stage1_scales_are_uniform_on_one_to_four() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool = vec![synth_image(&mut rng, 64, 64)];
    let n = 400;
    let mut scales = Vec::new();
    for _ in 0..n / 8 {
        for s in sample_stage1_batch(&mut rng, &pool, 8, 8, 16).unwrap() {
            assert!((1.0..4.0).contains(&s.scale));
            scales.push(s.scale);
        }
    }
    let mean = scales.iter().sum::<f64>() / n as f64;
    // U(1,4) has variance 9/12
    let sigma = (0.75f64 / n as f64).sqrt();
    assert!((mean - 2.5).abs() < 3.0 * sigma, "mean {mean}");
}

#[test]
fn stage1_sample_extents_and_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let img = synth_image(&mut rng, 96, 96);
    for _ in 0..20 {
        let s = sample_stage1(&mut rng, &img, 16, 100, (1.0, 4.0)).unwrap();
        let n = (s.scale * 16.0 + 1e-9).floor() as usize;
        assert_eq!((s.lr.height(), s.lr.width()), (16, 16));
        assert_eq!((s.hr.height(), s.hr.width()), (n, n));
        let q = s.query_batch().unwrap();
        assert_eq!(q.len(), 100);
        let t = s.targets();
        for (k, &i) in s.queries.iter().enumerate() {
            assert_eq!(&t.data()[k * 3..k * 3 + 3], &s.hr.data()[i * 3..i * 3 + 3]);
        }
    }
    assert!(sample_stage1(&mut rng, &ImageBuffer::filled(20, 20, [0.0; 3]).unwrap(), 16, 10, (2.0, 2.0)).is_err());
}

#[test]
fn stage2_sample_is_the_bicubic_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let img = synth_image(&mut rng, 64, 64);
    let s = sample_stage2(&mut rng, &img, 8, 3).unwrap();
    assert_eq!((s.hr.height(), s.lr.height()), (24, 8));
    let down = bicubic_resize(&s.hr, 3.0, ResizeDirection::Down).unwrap();
    assert_eq!(down, s.lr);
}

#[test]
fn degradation_is_deterministic_with_ceil_extents() {
    let img = synth_image(&mut ChaCha8Rng::seed_from_u64(14), 37, 50);
    for s in [2.0, 3.0, 4.0, 2.5] {
        let a = bicubic_resize(&img, s, ResizeDirection::Down).unwrap();
        let b = bicubic_resize(&img, s, ResizeDirection::Down).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.height(), (37.0f64 / s).ceil() as usize);
        assert_eq!(a.width(), (50.0f64 / s).ceil() as usize);
    }
}

proptest! {
    #[test]
    fn augmentation_moves_pixels_consistently(rot in 0u8..4, flip: bool, h in 1usize..9, w in 1usize..9) {
        let img = ImageBuffer::new(h, w, (0..h * w * 3).map(|i| i as f32 / (h * w * 3) as f32).collect()).unwrap();
        let a = Augment { rot, flip };
        let out = a.apply(&img);
        let (oh, ow) = a.out_dims(h, w);
        prop_assert_eq!((out.height(), out.width()), (oh, ow));
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = a.map(y, x, h, w);
                prop_assert_eq!(out.pixel(ty, tx), img.pixel(y, x));
            }
        }
    }

    #[test]
    fn augmented_queries_keep_their_targets(seed in 0u64..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = synth_image(&mut rng, 40, 40);
        let s = sample_stage1(&mut rng, &img, 8, 20, (1.0, 4.0)).unwrap();
        let a = Augment { rot: rng.gen_range(0..4), flip: rng.gen() };
        let t = s.augmented(a);
        let mut before: Vec<[u32; 3]> = s.targets().data().chunks(3).map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).collect();
        let mut after: Vec<[u32; 3]> = t.targets().data().chunks(3).map(|p| [p[0].to_bits(), p[1].to_bits(), p[2].to_bits()]).collect();
        prop_assert_eq!(&before, &after);
        before.sort();
        after.sort();
        prop_assert_eq!(before, after);
    }
}
