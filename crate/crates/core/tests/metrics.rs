//! PSNR and SSIM against closed forms, and the evaluation report layout.

use c2d_core::data::ImageBuffer;
use c2d_core::eval::{bicubic_baseline, psnr, ssim, MetricOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(rng: &mut impl Rng, h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::new(h, w, (0..h * w * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn shifted(img: &ImageBuffer, d: f32) -> ImageBuffer {
    ImageBuffer::new(img.height(), img.width(), img.data().iter().map(|v| v + d).collect()).unwrap()
}

#[test]
fn uniform_one_level_error_is_48_13_db() {
    let a = ImageBuffer::filled(16, 16, [0.5, 0.4, 0.6]).unwrap();
    let want = 20.0 * 255f64.log10();
    assert!((want - 48.13).abs() < 0.01);
    let rgb = psnr(&a, &shifted(&a, 1.0 / 255.0), false).unwrap();
    assert!((rgb - 48.13).abs() < 0.01, "{rgb}");
    // equal RGB steps of 1/219 move BT.601 luma by exactly 1/255
    let y = psnr(&a, &shifted(&a, 1.0 / 219.0), true).unwrap();
    assert!((y - 48.13).abs() < 0.01, "{y}");
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let a = noise(&mut ChaCha8Rng::seed_from_u64(0), 8, 8);
    assert_eq!(psnr(&a, &a, true).unwrap(), f64::INFINITY);
    assert!(psnr(&a, &noise(&mut ChaCha8Rng::seed_from_u64(1), 8, 9), true).is_err());
}

#[test]
fn ssim_identity_and_symmetry() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for i in 0..50 {
        let (h, w) = (rng.gen_range(11..30), rng.gen_range(11..30));
        let a = noise(&mut rng, h, w);
        let b = noise(&mut rng, h, w);
        for on_y in [true, false] {
            let saa = ssim(&a, &a, on_y).unwrap();
            assert!((saa - 1.0).abs() <= 1e-9, "pair {i}: {saa}");
            let (ab, ba) = (ssim(&a, &b, on_y).unwrap(), ssim(&b, &a, on_y).unwrap());
            assert!((ab - ba).abs() <= 1e-12, "pair {i}: {ab} vs {ba}");
            assert!(ab < 1.0);
        }
    }
}

#[test]
fn ssim_needs_a_full_window() {
    let a = ImageBuffer::filled(10, 40, [0.2; 3]).unwrap();
    assert!(ssim(&a, &a, true).is_err());
}

#[test]
fn ssim_of_constant_shift_matches_luminance_term() {
    // constant images: only the luminance term differs from one
    let a = ImageBuffer::filled(12, 12, [0.3; 3]).unwrap();
    let b = ImageBuffer::filled(12, 12, [0.5; 3]).unwrap();
    let c1 = 1e-4;
    let want = (2.0 * 0.3 * 0.5 + c1) / (0.3f64 * 0.3 + 0.5 * 0.5 + c1);
    let got = ssim(&a, &b, false).unwrap();
    assert!((got - want).abs() < 1e-6, "{got} vs {want}");
}

#[test]
fn report_csv_has_one_row_per_image_and_a_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<_> = (0..3)
        .map(|i| (format!("img{i}"), c2d_core::data::synth_image(&mut rng, 48, 40)))
        .collect();
    let r = bicubic_baseline(&images, 2, &MetricOptions::default(), "synthetic").unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(lines[0], "image,psnr_db,ssim");
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[1].starts_with("img0,"));
    assert!(lines[4].starts_with("MEAN,"));
    let mean: f64 = lines[1..4].iter().map(|l| l.split(',').nth(1).unwrap().parse::<f64>().unwrap()).sum::<f64>() / 3.0;
    assert!((mean - r.mean_psnr()).abs() < 1e-4);
    assert!(r.mean_psnr() > 20.0 && r.mean_ssim() > 0.5 && r.mean_ssim() <= 1.0);
}
