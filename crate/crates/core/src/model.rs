//! Full network: shallow conv, a stack of U-Net blocks, and either a
//! continuous (implicit function) or a pixel-shuffle upsampler.

use crate::block::{build_window_schedule, BlockOptions, HietBlock, ScheduleError, WindowSchedule};
use crate::data::cubic;
use crate::encodings::{cell_vector, coord_hier_encoding, grid_for_extents, scaled_extent, EncodingError, QueryCoord};
use crate::layer::{apply_conv, apply_linear, ConvIds, FfnKind, LayerOptions, LinearIds, ParamBuilder};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{0} upsampler cannot do that")]
    WrongUpsampler(&'static str),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    /// Arbitrary-scale implicit decoder over the deep features.
    Continuous,
    /// 3×3 conv to `3·s²` channels followed by pixel shuffle.
    Discrete,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub channels: usize,
    pub blocks: usize,
    /// Window size of every layer in a block, encoder first.
    pub windows: Vec<usize>,
    pub ffn_ratio: usize,
    pub ffn: FfnKind,
    pub ffn_kernel: usize,
    pub hier_encoding: bool,
    pub pre_norm: bool,
    pub unet: bool,
    pub block_conv: bool,
    pub block_residual: bool,
    pub long_residual: bool,
    /// Reflect-pad the input to a multiple of the largest window.
    pub pad_to_window: bool,
    pub upsampler: UpsamplerKind,
    /// Integer factor of the discrete upsampler.
    pub scale: usize,
    pub attn_heads: usize,
    pub attn_residual: bool,
    /// Add the bicubic upsampling of the input to either head's output, and
    /// start the head's last layer at zero.
    pub image_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 60,
            blocks: 4,
            windows: vec![64, 32, 8, 8, 32, 64],
            ffn_ratio: 2,
            ffn: FfnKind::Mlp,
            ffn_kernel: 5,
            hier_encoding: true,
            pre_norm: true,
            unet: true,
            block_conv: true,
            block_residual: true,
            long_residual: true,
            pad_to_window: true,
            upsampler: UpsamplerKind::Continuous,
            scale: 4,
            attn_heads: 1,
            attn_residual: true,
            image_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.channels == 0 || self.channels % 2 != 0 {
            return bad(format!("channels must be even and positive, got {}", self.channels));
        }
        if self.blocks == 0 {
            return bad("at least one block is required".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be positive".into());
        }
        if self.ffn == FfnKind::ConvFfn && self.ffn_kernel % 2 == 0 {
            return bad(format!("ffn_kernel must be odd, got {}", self.ffn_kernel));
        }
        if self.attn_heads == 0 || self.channels % self.attn_heads != 0 {
            return bad(format!("{} heads do not divide {} channels", self.attn_heads, self.channels));
        }
        if self.upsampler == UpsamplerKind::Discrete && self.scale == 0 {
            return bad("discrete scale must be positive".into());
        }
        build_window_schedule(&self.windows, (usize::MAX, usize::MAX))?;
        Ok(())
    }

    pub fn layer_options(&self) -> LayerOptions {
        LayerOptions {
            ffn_ratio: self.ffn_ratio,
            ffn: self.ffn,
            ffn_kernel: self.ffn_kernel,
            hier_encoding: self.hier_encoding,
            pre_norm: self.pre_norm,
        }
    }

    pub fn block_options(&self) -> BlockOptions {
        BlockOptions {
            unet: self.unet,
            block_conv: self.block_conv,
            residual: self.block_residual,
        }
    }

    pub fn schedule(&self) -> Result<WindowSchedule> {
        Ok(build_window_schedule(&self.windows, (usize::MAX, usize::MAX))?)
    }

    pub fn max_window(&self) -> usize {
        self.windows.iter().copied().max().unwrap_or(1)
    }

    /// Extents the feature extractor actually runs at for an `h×w` input.
    pub fn padded_extents(&self, h: usize, w: usize) -> (usize, usize) {
        if self.pad_to_window {
            let m = self.max_window();
            (h.div_ceil(m) * m, w.div_ceil(m) * m)
        } else {
            (h, w)
        }
    }
}

/// HR query positions for the continuous decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    /// Flat LR index of the nearest feature.
    pub nearest: Vec<u32>,
    /// `(x, y)` position inside that LR cell, in `[0, 1)`.
    pub local: Vec<[f32; 2]>,
    /// `[2/(sH), 2/(sW)]`.
    pub cell: [f32; 2],
}

impl QueryBatch {
    /// Every pixel of the `⌊sH⌋×⌊sW⌋` output, row-major.
    pub fn full_grid(s: f64, h: usize, w: usize) -> Result<Self> {
        Self::for_extents(s, h, w, scaled_extent(s, h), scaled_extent(s, w), None)
    }

    /// Queries for an explicit HR extent, optionally restricted to a subset of
    /// flat HR indices (in the given order).
    pub fn for_extents(s: f64, h: usize, w: usize, out_h: usize, out_w: usize, subset: Option<&[usize]>) -> Result<Self> {
        let cell = cell_vector(s, h, w)?.0;
        let grid = grid_for_extents(h, w, out_h, out_w);
        let (nearest, local) = match subset {
            None => (grid.nearest, grid.coords),
            Some(ix) => (
                ix.iter().map(|&i| grid.nearest[i]).collect(),
                ix.iter().map(|&i| grid.coords[i]).collect(),
            ),
        };
        Ok(Self { nearest, local, cell })
    }

    pub fn len(&self) -> usize {
        self.nearest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nearest.is_empty()
    }

    fn level_codes(&self, level: u32) -> Tensor {
        let data = self
            .local
            .iter()
            .flat_map(|&[x, y]| {
                let (bx, by) = coord_hier_encoding(&QueryCoord {
                    x_local: x,
                    y_local: y,
                    level,
                });
                [bx as f32, by as f32]
            })
            .collect();
        Tensor::new([self.len(), 2], data).expect("query codes")
    }

    fn cell_rows(&self) -> Tensor {
        let data = (0..self.len()).flat_map(|_| self.cell).collect();
        Tensor::new([self.len(), 2], data).expect("cell rows")
    }
}

/// Bicubic sample of an `H×W×C` map at each query's HR pixel centre, using
/// the same kernel and edge clamping as the data pipeline; `[N, C]`.
pub fn bicubic_at(g: &mut Graph, img: Var, q: &QueryBatch) -> crate::tensor::Result<Var> {
    let shape = g.shape(img).to_vec();
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let n = q.len();
    let mut idx = vec![Vec::with_capacity(n); 16];
    let mut wts = vec![Vec::with_capacity(n * c); 16];
    let axis = |cell: usize, local: f32, len: usize| {
        let p = cell as f64 + local as f64 - 0.5;
        let base = p.floor();
        let mut taps = [(0usize, 0.0f64); 4];
        for (k, t) in taps.iter_mut().enumerate() {
            let j = base + k as f64 - 1.0;
            *t = (j.clamp(0.0, (len - 1) as f64) as usize, cubic(p - j));
        }
        taps
    };
    for (&near, &[lx, ly]) in q.nearest.iter().zip(&q.local) {
        let (ry, rx) = (near as usize / w, near as usize % w);
        let ty = axis(ry, ly, h);
        let tx = axis(rx, lx, w);
        for (a, &(y, wy)) in ty.iter().enumerate() {
            for (b, &(x, wx)) in tx.iter().enumerate() {
                idx[a * 4 + b].push(Some((y * w + x) as u32));
                wts[a * 4 + b].extend(std::iter::repeat((wy * wx) as f32).take(c));
            }
        }
    }
    let mut acc = None;
    for (ix, wt) in idx.into_iter().zip(wts) {
        let t = g.gather_rows(img, ix.into(), vec![n, c])?;
        let wv = g.input(Tensor::new([n, c], wt)?);
        let term = g.mul(t, wv)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.expect("sixteen taps"))
}

/// Kernelized (elu+1) multi-head attention across one sample's queries.
#[derive(Clone, Debug)]
pub struct LinearAttention {
    pub heads: usize,
    pub q: LinearIds,
    pub k: LinearIds,
    pub v: LinearIds,
    pub o: LinearIds,
}

impl LinearAttention {
    fn forward(&self, g: &mut Graph, x: Var) -> crate::tensor::Result<Var> {
        let c = g.shape(x)[1];
        let dh = c / self.heads;
        let q = apply_linear(g, x, self.q)?;
        let q = g.elu_plus_one(q);
        let k = apply_linear(g, x, self.k)?;
        let k = g.elu_plus_one(k);
        let v = apply_linear(g, x, self.v)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, (h + 1) * dh)?,
                    g.slice_cols(k, h * dh, (h + 1) * dh)?,
                    g.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = g.transpose(kh)?;
            let kv = g.matmul(kt, vh)?;
            let num = g.matmul(qh, kv)?;
            let ksum = g.sum_rows(kh);
            let ksum = g.transpose(ksum)?;
            let den = g.matmul(qh, ksum)?;
            outs.push(g.div_rows(num, den)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        apply_linear(g, cat, self.o)
    }
}

/// Implicit decoder: nearest feature + level-0 code + cell → MLP → linear
/// attention over the queries → + level-1 code → MLP → RGB.
#[derive(Clone, Debug)]
pub struct ContinuousUpsampler {
    pub mlp1: LinearIds,
    pub attn: LinearAttention,
    pub attn_residual: bool,
    pub mlp2: LinearIds,
    pub mlp3: LinearIds,
}

impl ContinuousUpsampler {
    fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, c: usize, heads: usize, attn_residual: bool) -> Self {
        Self {
            mlp1: pb.linear("up.mlp1", c + 4, c),
            attn: LinearAttention {
                heads,
                q: pb.linear("up.attn.q", c, c),
                k: pb.linear("up.attn.k", c, c),
                v: pb.linear("up.attn.v", c, c),
                o: pb.linear("up.attn.o", c, c),
            },
            attn_residual,
            mlp2: pb.linear("up.mlp2", c + 2, c),
            mlp3: pb.linear("up.mlp3", c, 3),
        }
    }

    fn param_count(c: usize) -> usize {
        (c + 4) * c + c + 4 * (c * c + c) + (c + 2) * c + c + c * 3 + 3
    }

    /// `features` is `H×W×C`; returns `[N, 3]`.
    pub fn forward(&self, g: &mut Graph, features: Var, q: &QueryBatch) -> crate::tensor::Result<Var> {
        let c = g.shape(features)[2];
        let idx: Arc<[Option<u32>]> = q.nearest.iter().map(|&i| Some(i)).collect();
        let f = g.gather_rows(features, idx, vec![q.len(), c])?;
        let code0 = g.input(q.level_codes(0));
        let cell = g.input(q.cell_rows());
        let x = g.concat_cols(&[f, code0, cell])?;
        let z = apply_linear(g, x, self.mlp1)?;
        let z = g.gelu(z);
        let a = self.attn.forward(g, z)?;
        let z = if self.attn_residual { g.add(z, a)? } else { a };
        let code1 = g.input(q.level_codes(1));
        let x = g.concat_cols(&[z, code1])?;
        let z = apply_linear(g, x, self.mlp2)?;
        let z = g.gelu(z);
        apply_linear(g, z, self.mlp3)
    }
}

#[derive(Clone, Debug)]
pub enum Upsampler {
    Continuous(ContinuousUpsampler),
    Discrete { conv: ConvIds, scale: usize },
}

/// Prefix shared by every upsampler parameter name.
pub const UPSAMPLER_PREFIX: &str = "up.";

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: ParamStore,
    shallow: ConvIds,
    blocks: Vec<HietBlock>,
    deep_conv: ConvIds,
    up: Upsampler,
}

impl Model {
    pub fn new<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let schedule = cfg.schedule()?;
        let mut params = ParamStore::new();
        let mut pb = ParamBuilder {
            store: &mut params,
            rng,
        };
        let shallow = pb.conv("shallow", 3, c, 3);
        let blocks = (0..cfg.blocks)
            .map(|b| {
                HietBlock::new(
                    &mut pb,
                    &format!("blocks.{b}"),
                    c,
                    schedule.clone(),
                    cfg.layer_options(),
                    cfg.block_options(),
                )
            })
            .collect();
        let deep_conv = pb.conv("deep.conv", c, c, 3);
        let up = match cfg.upsampler {
            UpsamplerKind::Continuous => {
                Upsampler::Continuous(ContinuousUpsampler::new(&mut pb, c, cfg.attn_heads, cfg.attn_residual))
            }
            UpsamplerKind::Discrete => Upsampler::Discrete {
                conv: pb.conv("up.conv", c, 3 * cfg.scale * cfg.scale, 3),
                scale: cfg.scale,
            },
        };
        if cfg.image_skip {
            let last = match &up {
                Upsampler::Continuous(u) => [u.mlp3.w, u.mlp3.b],
                Upsampler::Discrete { conv, .. } => [conv.w, conv.b],
            };
            for id in last {
                params.get_mut(id).data_mut().fill(0.0);
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            params,
            shallow,
            blocks,
            deep_conv,
            up,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn upsampler(&self) -> &Upsampler {
        &self.up
    }

    /// Parameter count of the shallow + deep extractor.
    pub fn extractor_param_count(cfg: &ModelConfig) -> Result<usize> {
        let c = cfg.channels;
        let block = HietBlock::param_count(c, &cfg.schedule()?, &cfg.layer_options(), &cfg.block_options());
        Ok((27 * c + c) + cfg.blocks * block + (9 * c * c + c))
    }

    pub fn upsampler_param_count(cfg: &ModelConfig) -> usize {
        let c = cfg.channels;
        match cfg.upsampler {
            UpsamplerKind::Continuous => ContinuousUpsampler::param_count(c),
            UpsamplerKind::Discrete => {
                let out = 3 * cfg.scale * cfg.scale;
                9 * c * out + out
            }
        }
    }

    /// `3×3` conv from RGB to `C` channels.
    pub fn shallow_extract(&self, g: &mut Graph, img: Var) -> crate::tensor::Result<Var> {
        apply_conv(g, img, self.shallow)
    }

    /// Blocks, trailing conv, and the long skip.
    pub fn deep_extract(&self, g: &mut Graph, fs: Var) -> crate::tensor::Result<Var> {
        let mut h = fs;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let h = apply_conv(g, h, self.deep_conv)?;
        if self.cfg.long_residual {
            g.add(fs, h)
        } else {
            Ok(h)
        }
    }

    /// Deep features of an `H×W×3` input, cropped back to `H×W` after any
    /// window padding.
    pub fn features(&self, g: &mut Graph, img: Var) -> crate::tensor::Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[2] != 3 {
            return Err(TensorError::BadShape {
                op: "model",
                msg: format!("expected H×W×3 input, got {s:?}"),
            });
        }
        let (h, w) = (s[0], s[1]);
        let (ph, pw) = self.cfg.padded_extents(h, w);
        let x = if (ph, pw) != (h, w) {
            let idx = reflect_index(h, w, ph, pw);
            g.gather_rows(img, idx, vec![ph, pw, 3])?
        } else {
            img
        };
        let fs = self.shallow_extract(g, x)?;
        let fd = self.deep_extract(g, fs)?;
        if (ph, pw) != (h, w) {
            let idx: Arc<[Option<u32>]> = (0..h)
                .flat_map(|y| (0..w).map(move |x| Some((y * pw + x) as u32)))
                .collect();
            g.gather_rows(fd, idx, vec![h, w, self.cfg.channels])
        } else {
            Ok(fd)
        }
    }

    /// RGB at the given queries, `[N, 3]`.
    pub fn forward_continuous(&self, g: &mut Graph, img: Var, q: &QueryBatch) -> Result<Var> {
        let Upsampler::Continuous(up) = &self.up else {
            return Err(ModelError::WrongUpsampler("discrete"));
        };
        let fd = self.features(g, img)?;
        let y = up.forward(g, fd, q)?;
        if self.cfg.image_skip {
            let b = bicubic_at(g, img, q)?;
            Ok(g.add(y, b)?)
        } else {
            Ok(y)
        }
    }

    /// `sH×sW×3` output of the pixel-shuffle head.
    pub fn forward_discrete(&self, g: &mut Graph, img: Var) -> Result<Var> {
        let Upsampler::Discrete { conv, scale } = &self.up else {
            return Err(ModelError::WrongUpsampler("continuous"));
        };
        let fd = self.features(g, img)?;
        let y = apply_conv(g, fd, *conv)?;
        let y = g.pixel_shuffle(y, *scale)?;
        if !self.cfg.image_skip {
            return Ok(y);
        }
        let (h, w) = (g.shape(img)[0], g.shape(img)[1]);
        let (oh, ow) = (h * scale, w * scale);
        let q = QueryBatch::for_extents(*scale as f64, h, w, oh, ow, None)?;
        let b = bicubic_at(g, img, &q)?;
        let b = g.reshape(b, vec![oh, ow, 3])?;
        Ok(g.add(y, b)?)
    }

    /// Inference on one `H×W×3` image. The discrete head ignores `s` beyond
    /// checking it matches its own factor.
    pub fn super_resolve(&self, lr: &Tensor, s: f64) -> Result<Tensor> {
        let mut g = Graph::with_params(&self.params);
        let x = g.input(lr.clone());
        match &self.up {
            Upsampler::Discrete { scale, .. } => {
                if (s - *scale as f64).abs() > 1e-9 {
                    return Err(ModelError::Config(format!("model is fixed at x{scale}, asked for x{s}")));
                }
                let y = self.forward_discrete(&mut g, x)?;
                Ok(g.value(y).clone())
            }
            Upsampler::Continuous(_) => {
                if !(1.0..=4.0).contains(&s) {
                    return Err(ModelError::Config(format!("continuous scale must lie in [1, 4], got {s}")));
                }
                let (h, w) = (lr.shape()[0], lr.shape()[1]);
                let q = QueryBatch::full_grid(s, h, w)?;
                let (oh, ow) = (scaled_extent(s, h), scaled_extent(s, w));
                let y = self.forward_continuous(&mut g, x, &q)?;
                Ok(g.value(y).clone().reshape([oh, ow, 3])?)
            }
        }
    }

    /// Copies every extractor tensor (anything outside the upsampler) from
    /// `src`. Returns the number of tensors copied.
    pub fn load_extractor(&mut self, src: &ParamStore) -> Result<usize> {
        let mut n = 0;
        let ids: Vec<_> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            if name.starts_with(UPSAMPLER_PREFIX) {
                continue;
            }
            let t = src
                .by_name(&name)
                .ok_or_else(|| ModelError::Config(format!("source is missing {name}")))?;
            if t.shape() != self.params.get(id).shape() {
                return Err(ModelError::Config(format!(
                    "{name}: source shape {:?}, target {:?}",
                    t.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = t.clone();
            n += 1;
        }
        Ok(n)
    }
}

/// Row map of a reflect-padded `ph×pw` image onto an `h×w` source.
fn reflect_index(h: usize, w: usize, ph: usize, pw: usize) -> Arc<[Option<u32>]> {
    let refl = |i: usize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i % period;
        if m < n {
            m
        } else {
            period - m
        }
    };
    (0..ph)
        .flat_map(|y| (0..pw).map(move |x| Some((refl(y, h) * w + refl(x, w)) as u32)))
        .collect()
}
