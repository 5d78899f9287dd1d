//! PSNR / SSIM and the benchmark runner.

use crate::data::{bicubic_resize, mod_crop, DataError, ImageBuffer, ResizeDirection};
use crate::model::{Model, ModelError};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("extent mismatch: {0:?} vs {1:?}")]
    Extents((usize, usize), (usize, usize)),
    #[error("image {0}x{1} is smaller than the 11x11 SSIM window")]
    TooSmall(usize, usize),
    #[error("no images to evaluate")]
    Empty,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    /// Compare BT.601 luma instead of RGB.
    pub on_y: bool,
    /// Drop `scale` pixels at every border before comparing.
    pub border_crop: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            on_y: true,
            border_crop: true,
        }
    }
}

/// BT.601 luma of `[0, 1]` RGB, also in `[0, 1]`.
pub fn luma(img: &ImageBuffer) -> Vec<f64> {
    img.data()
        .chunks_exact(3)
        .map(|p| (16.0 + 65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0)
        .collect()
}

/// Channel planes to compare: one luma plane, or three RGB planes.
fn planes(img: &ImageBuffer, on_y: bool) -> Vec<Vec<f64>> {
    if on_y {
        vec![luma(img)]
    } else {
        (0..3)
            .map(|c| img.data().iter().skip(c).step_by(3).map(|&v| v as f64).collect())
            .collect()
    }
}

fn same_extents(a: &ImageBuffer, b: &ImageBuffer) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(EvalError::Extents((a.height(), a.width()), (b.height(), b.width())));
    }
    Ok(())
}

/// `10·log10(1/MSE)`; identical images give `+∞`.
pub fn psnr(a: &ImageBuffer, b: &ImageBuffer, on_y: bool) -> Result<f64> {
    same_extents(a, b)?;
    let (pa, pb) = (planes(a, on_y), planes(b, on_y));
    let mut se = 0.0f64;
    let mut n = 0usize;
    for (x, y) in pa.iter().zip(&pb) {
        for (u, v) in x.iter().zip(y) {
            se += (u - v) * (u - v);
        }
        n += x.len();
    }
    let mse = se / n as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut g = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable Gaussian filter over valid positions only.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WIN]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WIN + 1, w - SSIM_WIN + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WIN).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let g = gaussian_window();
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(u, v)| u * v).collect();
    let (ma, mb) = (filter_valid(a, h, w, &g), filter_valid(b, h, w, &g));
    let (saa, sbb, sab) = (filter_valid(&aa, h, w, &g), filter_valid(&bb, h, w, &g), filter_valid(&ab, h, w, &g));
    let mut acc = 0.0;
    for i in 0..ma.len() {
        let (mu_a, mu_b) = (ma[i], mb[i]);
        let va = saa[i] - mu_a * mu_a;
        let vb = sbb[i] - mu_b * mu_b;
        let cov = sab[i] - mu_a * mu_b;
        acc += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
    }
    acc / ma.len() as f64
}

/// Gaussian-window SSIM (11×11, σ = 1.5) averaged over valid positions and,
/// in RGB mode, over channels.
pub fn ssim(a: &ImageBuffer, b: &ImageBuffer, on_y: bool) -> Result<f64> {
    same_extents(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(EvalError::TooSmall(h, w));
    }
    let (pa, pb) = (planes(a, on_y), planes(b, on_y));
    let s: f64 = pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w)).sum();
    Ok(s / pa.len() as f64)
}

pub fn shave(img: &ImageBuffer, border: usize) -> Result<ImageBuffer> {
    if border == 0 {
        return Ok(img.clone());
    }
    if img.height() <= 2 * border || img.width() <= 2 * border {
        return Err(EvalError::TooSmall(img.height(), img.width()));
    }
    Ok(img.crop(border, border, img.height() - 2 * border, img.width() - 2 * border)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub image: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub model: String,
    pub dataset: String,
    pub scale: usize,
    pub options: MetricOptions,
    pub rows: Vec<ImageMetrics>,
}

impl MetricReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr_db).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// `# key=value` provenance line, header, one row per image, `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# model={} dataset={} scale={} on_y={} border_crop={}\n",
            self.model, self.dataset, self.scale, self.options.on_y, self.options.border_crop
        );
        s += "image,psnr_db,ssim\n";
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6}", r.image, r.psnr_db, r.ssim);
        }
        let _ = writeln!(s, "MEAN,{:.6},{:.6}", self.mean_psnr(), self.mean_ssim());
        s
    }
}

/// Compares two images after optional border cropping.
pub fn compare(sr: &ImageBuffer, hr: &ImageBuffer, scale: usize, opts: &MetricOptions) -> Result<(f64, f64)> {
    let border = if opts.border_crop { scale } else { 0 };
    let (a, b) = (shave(sr, border)?, shave(hr, border)?);
    Ok((psnr(&a, &b, opts.on_y)?, ssim(&a, &b, opts.on_y)?))
}

/// Degrades each HR image by `scale`, restores it with `restore`, and scores
/// the 8-bit result against the mod-cropped HR.
pub fn run_with<F>(
    images: &[(String, ImageBuffer)],
    scale: usize,
    opts: &MetricOptions,
    model: &str,
    dataset: &str,
    restore: F,
) -> Result<MetricReport>
where
    F: Fn(&ImageBuffer) -> Result<ImageBuffer> + Sync + Send,
{
    if images.is_empty() {
        return Err(EvalError::Empty);
    }
    let rows = crate::parallel::map(images, |_, (name, img)| -> Result<ImageMetrics> {
        let hr = mod_crop(img, scale)?;
        let lr = bicubic_resize(&hr, scale as f64, ResizeDirection::Down)?.quantized();
        let sr = restore(&lr)?.quantized();
        let (p, s) = compare(&sr, &hr, scale, opts)?;
        Ok(ImageMetrics {
            image: name.clone(),
            psnr_db: p,
            ssim: s,
        })
    });
    Ok(MetricReport {
        model: model.to_string(),
        dataset: dataset.to_string(),
        scale,
        options: *opts,
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Bicubic upsampling as the restoration.
pub fn bicubic_baseline(images: &[(String, ImageBuffer)], scale: usize, opts: &MetricOptions, dataset: &str) -> Result<MetricReport> {
    run_with(images, scale, opts, "bicubic", dataset, |lr| {
        Ok(bicubic_resize(lr, scale as f64, ResizeDirection::Up)?)
    })
}

pub fn run_benchmark(
    model: &Model,
    images: &[(String, ImageBuffer)],
    scale: usize,
    opts: &MetricOptions,
    model_name: &str,
    dataset: &str,
) -> Result<MetricReport> {
    run_with(images, scale, opts, model_name, dataset, |lr| {
        let out = model.super_resolve(&lr.to_tensor(), scale as f64)?;
        Ok(ImageBuffer::from_tensor(&out)?)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize) -> f32) -> ImageBuffer {
        ImageBuffer::new(h, w, (0..h * w * 3).map(f).collect()).unwrap()
    }

    #[test]
    fn psnr_closed_form() {
        let a = img(16, 16, |i| ((i * 37) % 200) as f32 / 255.0);
        let b = img(16, 16, |i| ((i * 37) % 200 + 1) as f32 / 255.0);
        let p = psnr(&a, &b, false).unwrap();
        assert!((p - 20.0 * 255f64.log10()).abs() < 1e-3, "{p}");
        assert_eq!(psnr(&a, &a, true).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &img(8, 16, |_| 0.0), true).is_err());
    }

    #[test]
    fn ssim_identity_and_size_guard() {
        let a = img(12, 13, |i| ((i * 7919) % 256) as f32 / 255.0);
        assert!((ssim(&a, &a, true).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&a, &a, false).unwrap() - 1.0).abs() < 1e-9);
        assert!(matches!(ssim(&img(10, 20, |_| 0.0), &img(10, 20, |_| 0.0), true), Err(EvalError::TooSmall(..))));
    }

    #[test]
    fn csv_layout() {
        let r = MetricReport {
            model: "m".into(),
            dataset: "d".into(),
            scale: 2,
            options: MetricOptions::default(),
            rows: vec![
                ImageMetrics {
                    image: "a".into(),
                    psnr_db: 30.0,
                    ssim: 0.9,
                },
                ImageMetrics {
                    image: "b".into(),
                    psnr_db: 32.0,
                    ssim: 0.8,
                },
            ],
        };
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[1], "image,psnr_db,ssim");
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "MEAN,31.000000,0.850000");
    }
}
