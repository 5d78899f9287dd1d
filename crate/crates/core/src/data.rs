//! Images, bicubic degradation, synthetic data and training-patch sampling.

use crate::encodings::scaled_extent;
use crate::model::QueryBatch;
use crate::tensor::Tensor;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {source}")]
    Decode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("cannot encode {path}: {source}")]
    Encode {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("invalid image: {0}")]
    BadImage(String),
    #[error("no usable images in {0}")]
    Empty(String),
    #[error("invalid resize: {0}")]
    BadResize(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    /// Clamps every value into `[0, 1]`; NaN becomes 0.
    pub fn new(h: usize, w: usize, mut data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 || data.len() != h * w * 3 {
            return Err(DataError::BadImage(format!("{h}x{w} with {} values", data.len())));
        }
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::new(h, w, (0..h * w).flat_map(|_| rgb).collect())
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            &[h, w, 3] => Self::new(h, w, t.data().to_vec()),
            s => Err(DataError::BadImage(format!("tensor of shape {s:?}"))),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.h, self.w, 3], self.data.clone()).expect("image extents")
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y0 + h > self.h || x0 + w > self.w {
            return Err(DataError::BadImage(format!(
                "crop {h}x{w} at ({y0}, {x0}) of {}x{}",
                self.h, self.w
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[(y * self.w + x0) * 3..(y * self.w + x0 + w) * 3]);
        }
        Ok(Self { h, w, data })
    }

    /// Round-trips through 8 bits per channel.
    pub fn quantized(&self) -> Self {
        Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect(),
        }
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_u8(v)).collect()
    }

    pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let img = image::load_from_memory(&bytes).map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    ImageBuffer::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(buf: &ImageBuffer, path: &Path) -> Result<()> {
    let err = |source| DataError::Encode {
        path: path.to_path_buf(),
        source,
    };
    image::save_buffer_with_format(
        path,
        &buf.to_rgb8(),
        buf.w as u32,
        buf.h as u32,
        image::ColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(err)
}

/// Every `*.png` under `dir/hr` (or `dir` itself when it has no `hr`
/// subfolder), sorted by file name.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let hr = dir.join("hr");
    let root = if hr.is_dir() { hr } else { dir.to_path_buf() };
    let rd = std::fs::read_dir(&root).map_err(|source| DataError::Io {
        path: root.clone(),
        source,
    })?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DataError::Empty(root.display().to_string()));
    }
    Ok(files)
}

/// Loads a dataset directory as `(file stem, image)` pairs.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, ImageBuffer)>> {
    list_dataset(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, load_image(&p)?))
        })
        .collect()
}

// ---- bicubic --------------------------------------------------------------

pub const BICUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeDirection {
    Up,
    Down,
}

/// Per output sample: first source index and normalized weights.
/// Sample centers are aligned (`(i + 0.5)·in/out - 0.5`); when shrinking, the
/// kernel is stretched by the shrink factor so it integrates over the source
/// footprint. Out-of-range taps are clamped to the edge.
fn resize_weights(n_in: usize, n_out: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let ratio = n_in as f64 / n_out as f64;
    let stretch = ratio.max(1.0);
    let support = 2.0 * stretch;
    (0..n_out)
        .map(|i| {
            let center = (i as f64 + 0.5) * ratio;
            let lo = (center - support).floor() as isize;
            let hi = (center + support).ceil() as isize;
            let mut idx = Vec::new();
            let mut wts = Vec::new();
            for j in lo..hi {
                let wgt = cubic((j as f64 + 0.5 - center) / stretch);
                if wgt != 0.0 {
                    idx.push(j.clamp(0, n_in as isize - 1) as usize);
                    wts.push(wgt);
                }
            }
            let sum: f64 = wts.iter().sum();
            for w in &mut wts {
                *w /= sum;
            }
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize to explicit extents (horizontal pass first).
pub fn resize_to(img: &ImageBuffer, out_h: usize, out_w: usize) -> Result<ImageBuffer> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::BadResize(format!(
            "{}x{} -> {out_h}x{out_w}",
            img.h, img.w
        )));
    }
    if (out_h, out_w) == (img.h, img.w) {
        return Ok(img.clone());
    }
    let wx = resize_weights(img.w, out_w);
    let wy = resize_weights(img.h, out_h);
    let mut tmp = vec![0.0f64; img.h * out_w * 3];
    for y in 0..img.h {
        for (x, (idx, wts)) in wx.iter().enumerate() {
            let mut acc = [0.0f64; 3];
            for (&j, &wgt) in idx.iter().zip(wts) {
                let p = (y * img.w + j) * 3;
                for c in 0..3 {
                    acc[c] += wgt * img.data[p + c] as f64;
                }
            }
            tmp[(y * out_w + x) * 3..(y * out_w + x) * 3 + 3].copy_from_slice(&acc);
        }
    }
    let mut out = vec![0.0f32; out_h * out_w * 3];
    for (y, (idx, wts)) in wy.iter().enumerate() {
        for x in 0..out_w {
            let mut acc = [0.0f64; 3];
            for (&j, &wgt) in idx.iter().zip(wts) {
                let p = (j * out_w + x) * 3;
                for c in 0..3 {
                    acc[c] += wgt * tmp[p + c];
                }
            }
            for c in 0..3 {
                out[(y * out_w + x) * 3 + c] = acc[c] as f32;
            }
        }
    }
    ImageBuffer::new(out_h, out_w, out)
}

/// Resize by factor `s`: up gives `⌊s·H⌋`, down gives `⌈H/s⌉`.
pub fn bicubic_resize(img: &ImageBuffer, s: f64, dir: ResizeDirection) -> Result<ImageBuffer> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(DataError::BadResize(format!("scale {s}")));
    }
    let (oh, ow) = match dir {
        ResizeDirection::Up => (scaled_extent(s, img.h), scaled_extent(s, img.w)),
        ResizeDirection::Down => (down_extent(img.h, s), down_extent(img.w, s)),
    };
    resize_to(img, oh, ow)
}

pub fn down_extent(n: usize, s: f64) -> usize {
    (n as f64 / s - 1e-9).ceil() as usize
}

// ---- synthetic images -----------------------------------------------------

/// A procedurally drawn image: smooth background, anti-aliased polygons,
/// disks and strokes, and a faint grating. Drawn at 4×4 supersampling, so
/// content is band-limited at the output resolution.
pub fn synth_image<R: Rng>(rng: &mut R, h: usize, w: usize) -> ImageBuffer {
    const SS: usize = 4;
    let color = |rng: &mut R| [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
    let c0 = color(rng);
    let c1 = color(rng);
    let theta: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());

    enum Shape {
        Disk { cx: f32, cy: f32, r: f32 },
        Rect { cx: f32, cy: f32, hw: f32, hh: f32, cos: f32, sin: f32 },
        Stroke { x0: f32, y0: f32, dx: f32, dy: f32, len: f32, half: f32 },
    }
    let n_shapes = rng.gen_range(6..14);
    let size = h.max(w) as f32;
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let cx = rng.gen_range(0.0..w as f32);
        let cy = rng.gen_range(0.0..h as f32);
        let shape = match rng.gen_range(0..3) {
            0 => Shape::Disk {
                cx,
                cy,
                r: rng.gen_range(0.04..0.25) * size,
            },
            1 => {
                let a: f32 = rng.gen_range(0.0..std::f32::consts::PI);
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.gen_range(0.04..0.3) * size,
                    hh: rng.gen_range(0.04..0.3) * size,
                    cos: a.cos(),
                    sin: a.sin(),
                }
            }
            _ => {
                let a: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
                Shape::Stroke {
                    x0: cx,
                    y0: cy,
                    dx: a.cos(),
                    dy: a.sin(),
                    len: rng.gen_range(0.2..0.8) * size,
                    half: rng.gen_range(0.6..2.5),
                }
            }
        };
        shapes.push((shape, color(rng)));
    }
    let freq: f32 = rng.gen_range(0.05..0.2);
    let gphase: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let gamp: f32 = rng.gen_range(0.0..0.12);
    let ga: f32 = rng.gen_range(0.0..std::f32::consts::PI);
    let (ggx, ggy) = (ga.cos(), ga.sin());

    let inside = |s: &Shape, x: f32, y: f32| -> bool {
        match *s {
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                cos,
                sin,
            } => {
                let (u, v) = (x - cx, y - cy);
                (u * cos + v * sin).abs() <= hw && (-u * sin + v * cos).abs() <= hh
            }
            Shape::Stroke {
                x0,
                y0,
                dx,
                dy,
                len,
                half,
            } => {
                let (u, v) = (x - x0, y - y0);
                let t = u * dx + v * dy;
                (0.0..=len).contains(&t) && (-u * dy + v * dx).abs() <= half
            }
        }
    };

    let mut data = Vec::with_capacity(h * w * 3);
    for py in 0..h {
        for px in 0..w {
            let mut acc = [0.0f32; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f32 + (sx as f32 + 0.5) / SS as f32;
                    let y = py as f32 + (sy as f32 + 0.5) / SS as f32;
                    let t = ((x * gx + y * gy) / size).clamp(0.0, 1.0);
                    let mut c = [0.0f32; 3];
                    for k in 0..3 {
                        c[k] = c0[k] * (1.0 - t) + c1[k] * t;
                    }
                    for (s, col) in &shapes {
                        if inside(s, x, y) {
                            c = *col;
                        }
                    }
                    let g = gamp * (std::f32::consts::TAU * freq * (x * ggx + y * ggy) + gphase).sin();
                    for k in 0..3 {
                        acc[k] += c[k] + g;
                    }
                }
            }
            for a in acc {
                data.push(a / (SS * SS) as f32);
            }
        }
    }
    ImageBuffer::new(h, w, data).expect("synthetic extents").quantized()
}

// ---- augmentation -----------------------------------------------------------

/// `rot` quarter turns counter-clockwise, then an optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Augment {
    pub rot: u8,
    pub flip: bool,
}

impl Augment {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            rot: rng.gen_range(0..4),
            flip: rng.gen(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rot % 4 == 0 && !self.flip
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.rot % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    /// Where source pixel `(y, x)` of an `h×w` image lands.
    pub fn map(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (mut y, mut x, mut h, mut w) = (y, x, h, w);
        for _ in 0..self.rot % 4 {
            // one CCW quarter turn: (y, x) -> (w-1-x, y), extents swap
            (y, x) = (w - 1 - x, y);
            (h, w) = (w, h);
        }
        let _ = h;
        if self.flip {
            x = w - 1 - x;
        }
        (y, x)
    }

    pub fn apply(&self, img: &ImageBuffer) -> ImageBuffer {
        if self.is_identity() {
            return img.clone();
        }
        let (oh, ow) = self.out_dims(img.h, img.w);
        let mut data = vec![0.0f32; img.data.len()];
        for y in 0..img.h {
            for x in 0..img.w {
                let (ty, tx) = self.map(y, x, img.h, img.w);
                let (s, d) = ((y * img.w + x) * 3, (ty * ow + tx) * 3);
                data[d..d + 3].copy_from_slice(&img.data[s..s + 3]);
            }
        }
        ImageBuffer { h: oh, w: ow, data }
    }
}

// ---- training samples -------------------------------------------------------

/// Continuous-scale sample: LR patch, its HR crop, and the HR pixels used as
/// queries (flat indices into `hr`).
#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Sample {
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
    pub scale: f64,
    pub queries: Vec<usize>,
}

impl Stage1Sample {
    pub fn query_batch(&self) -> crate::model::Result<QueryBatch> {
        QueryBatch::for_extents(
            self.scale,
            self.lr.h,
            self.lr.w,
            self.hr.h,
            self.hr.w,
            Some(&self.queries),
        )
    }

    /// RGB at every query, `[q, 3]`.
    pub fn targets(&self) -> Tensor {
        let data = self
            .queries
            .iter()
            .flat_map(|&i| self.hr.data[i * 3..i * 3 + 3].iter().copied())
            .collect();
        Tensor::new([self.queries.len(), 3], data).expect("query targets")
    }

    pub fn augmented(&self, a: Augment) -> Self {
        let queries = self
            .queries
            .iter()
            .map(|&i| {
                let (y, x) = a.map(i / self.hr.w, i % self.hr.w, self.hr.h, self.hr.w);
                let (_, ow) = a.out_dims(self.hr.h, self.hr.w);
                y * ow + x
            })
            .collect();
        Self {
            lr: a.apply(&self.lr),
            hr: a.apply(&self.hr),
            scale: self.scale,
            queries,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Sample {
    pub lr: ImageBuffer,
    pub hr: ImageBuffer,
}

impl Stage2Sample {
    pub fn augmented(&self, a: Augment) -> Self {
        Self {
            lr: a.apply(&self.lr),
            hr: a.apply(&self.hr),
        }
    }
}

fn random_crop<R: Rng>(rng: &mut R, img: &ImageBuffer, n: usize) -> Result<ImageBuffer> {
    let y = rng.gen_range(0..=img.h - n);
    let x = rng.gen_range(0..=img.w - n);
    img.crop(y, x, n, n)
}

/// One stage-1 item from `img`: `s ~ U(smin, smax)`, `⌊s·p⌋` HR crop, bicubic
/// LR of `p×p`, `q_count` distinct query pixels (all pixels, repeated in
/// order, if the crop has fewer).
pub fn sample_stage1<R: Rng>(
    rng: &mut R,
    img: &ImageBuffer,
    patch: usize,
    q_count: usize,
    scale_range: (f64, f64),
) -> Result<Stage1Sample> {
    let s = if scale_range.1 > scale_range.0 {
        rng.gen_range(scale_range.0..scale_range.1)
    } else {
        scale_range.0
    };
    let n = scaled_extent(s, patch);
    if n > img.h || n > img.w {
        return Err(DataError::BadImage(format!(
            "{}x{} image too small for a {n}x{n} crop",
            img.h, img.w
        )));
    }
    let hr = random_crop(rng, img, n)?;
    let lr = resize_to(&hr, patch, patch)?;
    let total = n * n;
    let queries = if q_count <= total {
        sample_indices(rng, total, q_count).into_vec()
    } else {
        (0..q_count).map(|i| i % total).collect()
    };
    let sample = Stage1Sample {
        lr,
        hr,
        scale: s,
        queries,
    };
    Ok(sample.augmented(Augment::random(rng)))
}

/// One stage-2 item: `s·p` HR crop and its `p×p` bicubic LR, augmented.
pub fn sample_stage2<R: Rng>(rng: &mut R, img: &ImageBuffer, patch: usize, scale: usize) -> Result<Stage2Sample> {
    let n = patch * scale;
    if n > img.h || n > img.w {
        return Err(DataError::BadImage(format!(
            "{}x{} image too small for a {n}x{n} crop",
            img.h, img.w
        )));
    }
    let hr = random_crop(rng, img, n)?;
    let lr = resize_to(&hr, patch, patch)?;
    Ok(Stage2Sample { lr, hr }.augmented(Augment::random(rng)))
}

/// Batch of stage-1 items drawn from a random image each.
pub fn sample_stage1_batch<R: Rng>(
    rng: &mut R,
    pool: &[ImageBuffer],
    batch: usize,
    patch: usize,
    q_count: usize,
) -> Result<Vec<Stage1Sample>> {
    if pool.is_empty() {
        return Err(DataError::Empty("image pool".into()));
    }
    (0..batch)
        .map(|_| {
            let img = &pool[rng.gen_range(0..pool.len())];
            sample_stage1(rng, img, patch, q_count, (1.0, 4.0))
        })
        .collect()
}

/// Crops `img` so both extents are multiples of `s`.
pub fn mod_crop(img: &ImageBuffer, s: usize) -> Result<ImageBuffer> {
    let (h, w) = (img.h - img.h % s, img.w - img.w % s);
    img.crop(0, 0, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        ImageBuffer::new(h, w, (0..h * w * 3).map(|i| (i / 3) as f32 / (h * w) as f32).collect()).unwrap()
    }

    #[test]
    fn kernel_partition_of_unity() {
        for k in 0..10 {
            let t = k as f64 / 10.0;
            let s: f64 = (-2..=2).map(|j| cubic(j as f64 - t)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn unit_scale_is_identity_and_constants_survive() {
        let img = ramp(5, 7);
        assert_eq!(bicubic_resize(&img, 1.0, ResizeDirection::Down).unwrap(), img);
        let c = ImageBuffer::filled(9, 6, [0.3, 0.6, 0.9]).unwrap();
        for (s, d) in [(2.0, ResizeDirection::Down), (3.0, ResizeDirection::Up), (1.7, ResizeDirection::Down)] {
            let r = bicubic_resize(&c, s, d).unwrap();
            assert!(r.data().chunks(3).all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[2] - 0.9).abs() < 1e-6));
        }
    }

    #[test]
    fn down_extents_round_up() {
        let img = ramp(9, 10);
        let r = bicubic_resize(&img, 2.0, ResizeDirection::Down).unwrap();
        assert_eq!((r.height(), r.width()), (5, 5));
        let r = bicubic_resize(&img, 3.0, ResizeDirection::Up).unwrap();
        assert_eq!((r.height(), r.width()), (27, 30));
    }

    #[test]
    fn augment_maps_pixels_consistently() {
        let img = ramp(3, 5);
        for rot in 0..4 {
            for flip in [false, true] {
                let a = Augment { rot, flip };
                let out = a.apply(&img);
                for y in 0..3 {
                    for x in 0..5 {
                        let (ty, tx) = a.map(y, x, 3, 5);
                        assert_eq!(out.pixel(ty, tx), img.pixel(y, x));
                    }
                }
            }
        }
        let flip = Augment { rot: 0, flip: true };
        assert_eq!(flip.apply(&flip.apply(&img)), img);
        let quarter = Augment { rot: 1, flip: false };
        let out = quarter.apply(&img);
        // top-right pixel of the source ends up top-left after a CCW turn
        assert_eq!(out.pixel(0, 0), img.pixel(0, 4));
    }

    #[test]
    fn stage1_samples_are_deterministic_and_sized() {
        let pool: Vec<_> = (0..3)
            .map(|i| synth_image(&mut ChaCha8Rng::seed_from_u64(i), 64, 64))
            .collect();
        let a = sample_stage1_batch(&mut ChaCha8Rng::seed_from_u64(9), &pool, 4, 16, 64).unwrap();
        let b = sample_stage1_batch(&mut ChaCha8Rng::seed_from_u64(9), &pool, 4, 16, 64).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert_eq!((s.lr.height(), s.lr.width()), (16, 16));
            assert_eq!(s.hr.height(), scaled_extent(s.scale, 16));
            assert_eq!(s.queries.len(), 64);
            assert!((1.0..4.0).contains(&s.scale));
        }
        assert!(sample_stage1_batch(&mut ChaCha8Rng::seed_from_u64(0), &[], 1, 16, 4).is_err());
    }

    #[test]
    fn png_roundtrip_and_corrupt_file() {
        let dir = tempfile::tempdir().unwrap();
        let img = synth_image(&mut ChaCha8Rng::seed_from_u64(2), 7, 5);
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        let one = ImageBuffer::filled(1, 1, [1.0, 0.0, 0.2]).unwrap().quantized();
        save_image(&one, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), one);
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nbroken").unwrap();
        assert!(matches!(load_image(&p), Err(DataError::Decode { .. })));
        assert!(matches!(load_image(&dir.path().join("missing.png")), Err(DataError::Io { .. })));
    }
}
