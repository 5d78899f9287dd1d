//! The hierarchical-encoding transformer layer.
//!
//! Pipeline for an `H×W×C` input `x`:
//! 1. optional LayerNorm, concatenate the window code plane, linear + GELU;
//! 2. partition into non-overlapping windows (zero-padded right/bottom);
//! 3. split channels into `Q` (first half) and `V` (second half);
//! 4. channel self-correlation per window;
//! 5. un-partition, linear back to `C`, LayerNorm;
//! 6. `y = x + attn`, then `y + FFN(LN(y))`.

use crate::encodings::{encoding_plane, WindowGeometry};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Feed-forward variant used after the attention branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// `Linear → GELU → Linear`.
    Mlp,
    /// `Linear → GELU → (+ depthwise conv → GELU) → Linear`.
    ConvFfn,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerOptions {
    pub ffn_ratio: usize,
    pub ffn: FfnKind,
    /// Depthwise kernel of [`FfnKind::ConvFfn`].
    pub ffn_kernel: usize,
    /// Concatenate the window code before the embedding MLP.
    pub hier_encoding: bool,
    /// LayerNorm in front of the embedding MLP.
    pub pre_norm: bool,
}

impl Default for LayerOptions {
    fn default() -> Self {
        Self {
            ffn_ratio: 2,
            ffn: FfnKind::Mlp,
            ffn_kernel: 5,
            hier_encoding: true,
            pre_norm: true,
        }
    }
}

pub const LN_EPS: f32 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvIds {
    pub w: ParamId,
    pub b: ParamId,
    pub k: usize,
}

/// Registers freshly initialized parameters under a name prefix.
pub struct ParamBuilder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> ParamBuilder<'_, R> {
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        let w = uniform_fan_in(self.rng, &[fan_in, fan_out], fan_in);
        let b = uniform_fan_in(self.rng, &[fan_out], fan_in);
        LinearIds {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), b),
        }
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvIds {
        let fan_in = cin * k * k;
        let w = uniform_fan_in(self.rng, &[cout, cin, k, k], fan_in);
        let b = uniform_fan_in(self.rng, &[cout], fan_in);
        ConvIds {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), b),
            k,
        }
    }

    pub fn depthwise(&mut self, name: &str, c: usize, k: usize) -> ConvIds {
        let w = uniform_fan_in(self.rng, &[c, 1, k, k], k * k);
        let b = uniform_fan_in(self.rng, &[c], k * k);
        ConvIds {
            w: self.store.add(format!("{name}.weight"), w),
            b: self.store.add(format!("{name}.bias"), b),
            k,
        }
    }

    pub fn norm(&mut self, name: &str, c: usize) -> NormIds {
        NormIds {
            gamma: self.store.add(format!("{name}.weight"), Tensor::full([c], 1.0)),
            beta: self.store.add(format!("{name}.bias"), Tensor::zeros([c])),
        }
    }
}

pub fn apply_linear(g: &mut Graph, x: Var, p: LinearIds) -> Result<Var> {
    let (w, b) = (g.param(p.w)?, g.param(p.b)?);
    g.linear(x, w, b)
}

pub fn apply_norm(g: &mut Graph, x: Var, p: NormIds) -> Result<Var> {
    let (gm, bt) = (g.param(p.gamma)?, g.param(p.beta)?);
    g.layer_norm(x, gm, bt, LN_EPS)
}

pub fn apply_conv(g: &mut Graph, x: Var, p: ConvIds) -> Result<Var> {
    let (w, b) = (g.param(p.w)?, g.param(p.b)?);
    g.conv2d(x, w, b, p.k / 2)
}

// ---- window partitioning ----------------------------------------------------

/// Bookkeeping for one window partition of an `height×width` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    pub height: usize,
    pub width: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub padded_h: usize,
    pub padded_w: usize,
}

impl WindowPartition {
    pub fn new(g: &WindowGeometry) -> Self {
        let padded_h = g.height.div_ceil(g.h) * g.h;
        let padded_w = g.width.div_ceil(g.w) * g.w;
        Self {
            height: g.height,
            width: g.width,
            win_h: g.h,
            win_w: g.w,
            padded_h,
            padded_w,
        }
    }

    pub fn windows_y(&self) -> usize {
        self.padded_h / self.win_h
    }

    pub fn windows_x(&self) -> usize {
        self.padded_w / self.win_w
    }

    pub fn num_windows(&self) -> usize {
        self.windows_y() * self.windows_x()
    }

    pub fn area(&self) -> usize {
        self.win_h * self.win_w
    }

    pub fn pad_bottom(&self) -> usize {
        self.padded_h - self.height
    }

    pub fn pad_right(&self) -> usize {
        self.padded_w - self.width
    }

    /// Source pixel of each windowed row; `None` marks zero padding.
    pub fn partition_index(&self) -> Arc<[Option<u32>]> {
        let mut idx = Vec::with_capacity(self.num_windows() * self.area());
        for wy in 0..self.windows_y() {
            for wx in 0..self.windows_x() {
                for ty in 0..self.win_h {
                    for tx in 0..self.win_w {
                        let (y, x) = (wy * self.win_h + ty, wx * self.win_w + tx);
                        idx.push((y < self.height && x < self.width).then(|| (y * self.width + x) as u32));
                    }
                }
            }
        }
        idx.into()
    }

    /// Windowed row of each original pixel.
    pub fn reverse_index(&self) -> Arc<[Option<u32>]> {
        let mut idx = Vec::with_capacity(self.height * self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let win = (y / self.win_h) * self.windows_x() + x / self.win_w;
                let t = (y % self.win_h) * self.win_w + x % self.win_w;
                idx.push(Some((win * self.area() + t) as u32));
            }
        }
        idx.into()
    }
}

/// Splits an `H×W×C` map into `[windows, h·w, C]`, row-major over windows.
pub fn window_partition(x: &Tensor, g: &WindowGeometry) -> Result<(Tensor, WindowPartition)> {
    let mut graph = Graph::new();
    let xv = graph.input(x.clone());
    let (out, meta) = partition_var(&mut graph, xv, g)?;
    Ok((graph.value(out).clone(), meta))
}

/// Inverse of [`window_partition`]; padding rows are dropped.
pub fn window_reverse(wins: &Tensor, meta: &WindowPartition) -> Result<Tensor> {
    let mut graph = Graph::new();
    let wv = graph.input(wins.clone());
    let out = reverse_var(&mut graph, wv, meta)?;
    Ok(graph.value(out).clone())
}

pub fn partition_var(g: &mut Graph, x: Var, geom: &WindowGeometry) -> Result<(Var, WindowPartition)> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[0] != geom.height || s[1] != geom.width {
        return Err(TensorError::BadShape {
            op: "window_partition",
            msg: format!("map {s:?} vs geometry {geom:?}"),
        });
    }
    let meta = WindowPartition::new(geom);
    let shape = vec![meta.num_windows(), meta.area(), s[2]];
    let out = g.gather_rows(x, meta.partition_index(), shape)?;
    Ok((out, meta))
}

pub fn reverse_var(g: &mut Graph, wins: Var, meta: &WindowPartition) -> Result<Var> {
    let s = g.shape(wins).to_vec();
    if s.len() != 3 || s[0] != meta.num_windows() || s[1] != meta.area() {
        return Err(TensorError::BadShape {
            op: "window_reverse",
            msg: format!("windows {s:?} vs partition {meta:?}"),
        });
    }
    let shape = vec![meta.height, meta.width, s[2]];
    g.gather_rows(wins, meta.reverse_index(), shape)
}

/// Channel self-correlation of one window pair `q, v` (`n×c` each).
pub fn csc(q: &Tensor, v: &Tensor) -> Result<Tensor> {
    if q.shape() != v.shape() || q.rank() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "csc",
            left: q.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (n, c) = (q.shape()[0], q.shape()[1]);
    let mut g = Graph::new();
    let qv = g.input(q.clone().reshape([1, n, c])?);
    let vv = g.input(v.clone().reshape([1, n, c])?);
    let out = g.csc(qv, vv)?;
    g.value(out).clone().reshape([n, c])
}

// ---- the layer ----------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct HietLayer {
    pub channels: usize,
    pub window: usize,
    pub opts: LayerOptions,
    pub norm1: Option<NormIds>,
    pub embed: LinearIds,
    pub out: LinearIds,
    pub norm2: NormIds,
    pub norm3: NormIds,
    pub fc1: LinearIds,
    pub dw: Option<ConvIds>,
    pub fc2: LinearIds,
}

impl HietLayer {
    pub fn new<R: Rng>(pb: &mut ParamBuilder<'_, R>, prefix: &str, channels: usize, window: usize, opts: LayerOptions) -> Self {
        assert!(channels % 2 == 0 && channels > 0, "channel count must be even");
        let c = channels;
        let hidden = opts.ffn_ratio * c;
        let enc = if opts.hier_encoding { 2 } else { 0 };
        let norm1 = opts.pre_norm.then(|| pb.norm(&format!("{prefix}.norm1"), c));
        let embed = pb.linear(&format!("{prefix}.embed"), c + enc, c);
        let out = pb.linear(&format!("{prefix}.proj"), c / 2, c);
        let norm2 = pb.norm(&format!("{prefix}.norm2"), c);
        let norm3 = pb.norm(&format!("{prefix}.norm3"), c);
        let fc1 = pb.linear(&format!("{prefix}.ffn.fc1"), c, hidden);
        let dw = match opts.ffn {
            FfnKind::Mlp => None,
            FfnKind::ConvFfn => Some(pb.depthwise(&format!("{prefix}.ffn.dw"), hidden, opts.ffn_kernel)),
        };
        let fc2 = pb.linear(&format!("{prefix}.ffn.fc2"), hidden, c);
        Self {
            channels,
            window,
            opts,
            norm1,
            embed,
            out,
            norm2,
            norm3,
            fc1,
            dw,
            fc2,
        }
    }

    /// Parameters a layer with these settings owns.
    pub fn param_count(channels: usize, opts: &LayerOptions) -> usize {
        let c = channels;
        let hidden = opts.ffn_ratio * c;
        let enc = if opts.hier_encoding { 2 } else { 0 };
        let norm1 = if opts.pre_norm { 2 * c } else { 0 };
        let dw = match opts.ffn {
            FfnKind::Mlp => 0,
            FfnKind::ConvFfn => hidden * opts.ffn_kernel * opts.ffn_kernel + hidden,
        };
        norm1 + (c + enc) * c + c + (c / 2) * c + c + 4 * c + c * hidden + hidden + dw + hidden * c + c
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.channels {
            return Err(TensorError::BadShape {
                op: "hiet_layer",
                msg: format!("input {s:?}, layer has {} channels", self.channels),
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let geom = WindowGeometry::clamped(self.window, w, h);

        let mut e = x;
        if let Some(n1) = self.norm1 {
            e = apply_norm(g, e, n1)?;
        }
        if self.opts.hier_encoding {
            let plane = g.input(encoding_plane(&geom));
            e = g.concat_cols(&[e, plane])?;
        }
        let e = apply_linear(g, e, self.embed)?;
        let e = g.gelu(e);

        let (wins, meta) = partition_var(g, e, &geom)?;
        let q = g.slice_cols(wins, 0, c / 2)?;
        let v = g.slice_cols(wins, c / 2, c)?;
        let corr = g.csc(q, v)?;
        let back = reverse_var(g, corr, &meta)?;
        let proj = apply_linear(g, back, self.out)?;
        let attn = apply_norm(g, proj, self.norm2)?;
        let y = g.add(x, attn)?;

        let n = apply_norm(g, y, self.norm3)?;
        let hdn = apply_linear(g, n, self.fc1)?;
        let mut hdn = g.gelu(hdn);
        if let Some(dw) = self.dw {
            let (wv, bv) = (g.param(dw.w)?, g.param(dw.b)?);
            let conv = g.depthwise_conv2d(hdn, wv, bv)?;
            let conv = g.gelu(conv);
            hdn = g.add(hdn, conv)?;
        }
        let f = apply_linear(g, hdn, self.fc2)?;
        g.add(y, f)
    }
}
