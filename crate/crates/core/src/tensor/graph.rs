use super::kernels::{self, ConvShape};
use super::{Result, Tensor, TensorError};
use crate::params::{Grads, ParamId, ParamStore};
use std::sync::Arc;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gelu(Var),
    EluPlusOne(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Conv2d(Var, Var, Var, ConvShape),
    DepthwiseConv2d(Var, Var, Var, usize),
    GatherRows(Var, Arc<[Option<u32>]>),
    PixelShuffle(Var, usize),
    Csc(Var, Var),
    SumRows(Var),
    DivRows(Var, Var),
    Reshape(Var),
    Sum(Var),
    SumSquares(Var),
    L1 { pred: Var, sign: Vec<f32> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Build one per forward pass; parameters are
/// read from a shared [`ParamStore`] and never mutated through the graph.
pub struct Graph<'a> {
    store: Option<&'a ParamStore>,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Tensor>>,
    macs: u64,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grads: Vec::new(),
            macs: 0,
        }
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn bad(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::BadShape { op, msg: msg.into() }
}

const GELU_K: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_C: f32 = 0.044_715;

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl<'a> Graph<'a> {
    pub fn with_params(store: &'a ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            grads: Vec::new(),
            macs: 0,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant: no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// A free variable whose gradient is tracked (used by gradient checks).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// The graph node for a stored parameter; repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.store.ok_or(TensorError::NoParams("Graph::param"))?;
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Multiply–accumulate operations recorded by forward ops so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- forward ops -------------------------------------------------------

    /// `a[..×K] · b[K×N]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.rows_cols();
        if bv.rank() != 2 || bv.shape()[0] != k {
            return Err(mismatch("matmul", av, bv));
        }
        let n = bv.shape()[1];
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `x[..×K] · w[K×N] + bias[N]`
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
        let (m, k) = xv.rows_cols();
        if wv.rank() != 2 || wv.shape()[0] != k {
            return Err(mismatch("linear", xv, wv));
        }
        let n = wv.shape()[1];
        if bv.numel() != n {
            return Err(mismatch("linear(bias)", wv, bv));
        }
        let mut out = kernels::matmul(xv.data(), wv.data(), m, k, n);
        for row in out.chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.macs += (m * k * n) as u64;
        let ng = self.ng(x) || self.ng(w) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::Linear(x, w, bias), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av, bv));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch("mul", av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f32) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 2 {
            return Err(bad("transpose", format!("needs rank 2, got {:?}", av.shape())));
        }
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = transpose_data(av.data(), r, c);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a), ng))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| bad("concat_cols", "no inputs"))?;
        let lead = self.value(*first).shape();
        let lead = lead[..lead.len() - 1].to_vec();
        let (rows, _) = self.value(*first).rows_cols();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_cols", self.value(*first), self.value(p)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0f32; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead;
        shape.push(total);
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        if start >= end || end > cols {
            return Err(bad("slice_cols", format!("range {start}..{end} of {cols} columns")));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&av.data()[r * cols + start..r * cols + end]);
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::SliceCols(a, start), ng))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| gelu(x)).collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::Gelu(a), ng)
    }

    /// `elu(x) + 1`, the positive feature map of kernelized linear attention.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x + 1.0 } else { x.exp() })
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::EluPlusOne(a), ng)
    }

    /// Layer normalization over the last axis, statistics in `f64`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (rows, c) = xv.rows_cols();
        if gv.numel() != c || bv.numel() != c {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let mut out = vec![0.0f32; rows * c];
        let mut xhat = vec![0.0f32; rows * c];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..c {
                let xh = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Same-size cross-correlation of an `H×W×Cin` map with `[Cout, Cin, k, k]`
    /// weights and zero padding `pad`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 || wv.rank() != 4 {
            return Err(bad("conv2d", format!("input {:?}, weight {:?}", xv.shape(), wv.shape())));
        }
        let (h, wd, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, wcin, k, k2) = (wv.shape()[0], wv.shape()[1], wv.shape()[2], wv.shape()[3]);
        if wcin != cin {
            return Err(mismatch("conv2d(channels)", xv, wv));
        }
        if k != k2 || k > h + 2 * pad || k > wd + 2 * pad {
            return Err(bad("conv2d", format!("kernel {k}x{k2} with padding {pad}")));
        }
        if bv.numel() != cout {
            return Err(mismatch("conv2d(bias)", wv, bv));
        }
        let s = ConvShape {
            h,
            w: wd,
            cin,
            cout,
            k,
            pad,
        };
        let out = kernels::conv2d(xv.data(), wv.data(), bv.data(), &s);
        let (oh, ow) = s.out_dims();
        self.macs += (oh * ow * k * k * cin * cout) as u64;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new([oh, ow, cout], out)?, Op::Conv2d(x, w, b, s), ng))
    }

    /// Same-size depthwise convolution, weights `[C, 1, k, k]`, odd `k`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 || wv.rank() != 4 {
            return Err(bad("depthwise_conv2d", format!("input {:?}, weight {:?}", xv.shape(), wv.shape())));
        }
        let (h, wd, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let k = wv.shape()[2];
        if wv.shape()[0] != c || wv.shape()[1] != 1 || wv.shape()[3] != k || k % 2 == 0 || bv.numel() != c {
            return Err(mismatch("depthwise_conv2d", xv, wv));
        }
        let out = kernels::depthwise_conv2d(xv.data(), wv.data(), bv.data(), h, wd, c, k);
        self.macs += (h * wd * k * k * c) as u64;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(Tensor::new([h, wd, c], out)?, Op::DepthwiseConv2d(x, w, b, k), ng))
    }

    /// Row gather: output row `r` is input row `idx[r]`, or zeros for `None`.
    /// The input is viewed as `rows × cols` (last axis = cols).
    pub fn gather_rows(&mut self, a: Var, idx: Arc<[Option<u32>]>, shape: Vec<usize>) -> Result<Var> {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        if shape.last() != Some(&cols) || shape.iter().product::<usize>() != idx.len() * cols {
            return Err(bad("gather_rows", format!("output {shape:?} for {} rows of {cols}", idx.len())));
        }
        let mut out = vec![0.0f32; idx.len() * cols];
        for (r, src) in idx.iter().enumerate() {
            if let Some(s) = *src {
                let s = s as usize;
                if s >= rows {
                    return Err(bad("gather_rows", format!("row {s} out of {rows}")));
                }
                out[r * cols..(r + 1) * cols].copy_from_slice(&av.data()[s * cols..(s + 1) * cols]);
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(shape, out)?, Op::GatherRows(a, idx), ng))
    }

    /// Depth-to-space on an `H×W×(C·r²)` map: channel `c·r² + dy·r + dx` of
    /// pixel `(y, x)` lands at pixel `(y·r + dy, x·r + dx)`, channel `c`.
    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let av = self.value(a);
        if av.rank() != 3 || r == 0 || av.shape()[2] % (r * r) != 0 {
            return Err(bad("pixel_shuffle", format!("shape {:?} with factor {r}", av.shape())));
        }
        let (h, w, cr) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let c = cr / (r * r);
        let mut out = vec![0.0f32; av.numel()];
        for_each_shuffle(h, w, c, r, |src, dst| out[dst] = av.data()[src]);
        let ng = self.ng(a);
        Ok(self.push(Tensor::new([h * r, w * r, c], out)?, Op::PixelShuffle(a, r), ng))
    }

    /// Channel self-correlation per window: for `q, v` of shape
    /// `[windows, n, c]`, each window yields `((qᵀv / n) · vᵀ)ᵀ`.
    pub fn csc(&mut self, q: Var, v: Var) -> Result<Var> {
        let (qv, vv) = (self.value(q), self.value(v));
        if qv.shape() != vv.shape() || qv.rank() != 3 {
            return Err(mismatch("csc", qv, vv));
        }
        let (nw, n, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let mut out = vec![0.0f32; nw * n * c];
        let mut corr = vec![0.0f32; c * c];
        for wi in 0..nw {
            let qs = &qv.data()[wi * n * c..(wi + 1) * n * c];
            let vs = &vv.data()[wi * n * c..(wi + 1) * n * c];
            csc_corr(qs, vs, n, c, &mut corr);
            let os = &mut out[wi * n * c..(wi + 1) * n * c];
            // out[t, a] = Σ_b v[t, b] · corr[a, b]
            for t in 0..n {
                let vrow = &vs[t * c..(t + 1) * c];
                for a in 0..c {
                    os[t * c + a] = kernels::dot(vrow, &corr[a * c..(a + 1) * c]);
                }
            }
        }
        let shape = qv.shape().to_vec();
        self.macs += (2 * nw * n * c * c) as u64;
        let ng = self.ng(q) || self.ng(v);
        Ok(self.push(Tensor::new(shape, out)?, Op::Csc(q, v), ng))
    }

    /// Column sums of a `rows × cols` view, shape `[1, cols]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, cols) = av.rows_cols();
        let mut acc = vec![0.0f64; cols];
        for r in 0..rows {
            for (s, &v) in acc.iter_mut().zip(&av.data()[r * cols..(r + 1) * cols]) {
                *s += v as f64;
            }
        }
        let out = Tensor::new([1, cols], acc.into_iter().map(|v| v as f32).collect()).unwrap();
        let ng = self.ng(a);
        self.push(out, Op::SumRows(a), ng)
    }

    /// Divides each row of `num` (`R×N`) by the matching entry of `den` (`R×1`).
    pub fn div_rows(&mut self, num: Var, den: Var) -> Result<Var> {
        let (nv, dv) = (self.value(num), self.value(den));
        let (rows, cols) = nv.rows_cols();
        if dv.numel() != rows {
            return Err(mismatch("div_rows", nv, dv));
        }
        let mut out = nv.data().to_vec();
        for r in 0..rows {
            let d = dv.data()[r];
            for o in &mut out[r * cols..(r + 1) * cols] {
                *o /= d;
            }
        }
        let ng = self.ng(num) || self.ng(den);
        Ok(self.push(Tensor::new(nv.shape().to_vec(), out)?, Op::DivRows(num, den), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum_f64() as f32;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s as f32), Op::SumSquares(a), ng)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(mismatch("l1_loss", pv, target));
        }
        let n = pv.numel().max(1);
        let mut acc = 0.0f64;
        let mut sign = Vec::with_capacity(pv.numel());
        for (&p, &t) in pv.data().iter().zip(target.data()) {
            let d = p - t;
            acc += (d as f64).abs();
            sign.push(if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            });
        }
        let ng = self.ng(pred);
        let loss = acc / n as f64;
        Ok(self.push(Tensor::scalar(loss as f32), Op::L1 { pred, sign }, ng))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of every parameter reached by the last backward pass.
    pub fn param_grads(&self) -> Grads {
        let mut out = Grads::new(self.param_vars.len());
        for v in self.param_vars.iter().flatten() {
            if let (Op::Param(id), Some(g)) = (&self.nodes[v.0].op, self.grad(*v)) {
                out.accumulate(*id, g);
            }
        }
        out
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Input | Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.rows_cols();
                let n = bv.shape()[1];
                if self.ng(*a) {
                    let da = kernels::matmul_bt(gd, bv.data(), m, n, k);
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0f32; k * n];
                    kernels::matmul_at_acc(av.data(), gd, m, k, n, &mut db);
                    self.acc(grads, *b, db);
                }
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (m, k) = xv.rows_cols();
                let n = wv.shape()[1];
                if self.ng(*x) {
                    let dx = kernels::matmul_bt(gd, wv.data(), m, n, k);
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![0.0f32; k * n];
                    kernels::matmul_at_acc(xv.data(), gd, m, k, n, &mut dw);
                    self.acc(grads, *w, dw);
                }
                if self.ng(*b) {
                    let mut db = vec![0.0f32; n];
                    for row in gd.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.ng(*v) {
                        self.acc(grads, *v, gd.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                    self.acc(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                    self.acc(grads, *b, d);
                }
            }
            Op::Scale(a, k) => {
                self.acc(grads, *a, gd.iter().map(|v| v * k).collect());
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                self.acc(grads, *a, transpose_data(gd, s[0], s[1]));
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.rows_cols();
                let mut off = 0;
                for p in parts {
                    let w = *self.value(*p).shape().last().unwrap();
                    if self.ng(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + w]);
                        }
                        self.acc(grads, *p, d);
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let (rows, cols) = self.value(*a).rows_cols();
                let w = node.value.rows_cols().1;
                let mut d = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.acc(grads, *a, d);
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = gd.iter().zip(av.data()).map(|(g, &x)| g * gelu_grad(x)).collect();
                self.acc(grads, *a, d);
            }
            Op::EluPlusOne(a) => {
                let av = self.value(*a);
                let d = gd
                    .iter()
                    .zip(av.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * x.exp() })
                    .collect();
                self.acc(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let (rows, c) = node.value.rows_cols();
                if self.ng(*x) {
                    let mut dx = vec![0.0f32; rows * c];
                    for r in 0..rows {
                        let gr = &gd[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut s1 = 0.0f64;
                        let mut s2 = 0.0f64;
                        for j in 0..c {
                            let dxh = (gr[j] * gam[j]) as f64;
                            s1 += dxh;
                            s2 += dxh * xh[j] as f64;
                        }
                        let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                        for j in 0..c {
                            let dxh = (gr[j] * gam[j]) as f64;
                            dx[r * c + j] = (rstd[r] as f64 * (dxh - m1 - xh[j] as f64 * m2)) as f32;
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![0.0f32; c];
                    let mut db = vec![0.0f32; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] += gd[r * c + j] * xhat[r * c + j];
                            db[j] += gd[r * c + j];
                        }
                    }
                    if self.ng(*gamma) {
                        self.acc(grads, *gamma, dg);
                    }
                    if self.ng(*beta) {
                        self.acc(grads, *beta, db);
                    }
                }
            }
            Op::Conv2d(x, w, b, s) => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.value(*x).data(), self.value(*w).data(), gd, s, self.ng(*x));
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    self.acc(grads, *w, dw);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, db);
                }
            }
            Op::DepthwiseConv2d(x, w, b, k) => {
                let s = self.value(*x).shape();
                let (dx, dw, db) = kernels::depthwise_conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    s[0],
                    s[1],
                    s[2],
                    *k,
                    self.ng(*x),
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    self.acc(grads, *w, dw);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, db);
                }
            }
            Op::GatherRows(a, idx) => {
                let av = self.value(*a);
                let (_, cols) = av.rows_cols();
                let mut d = vec![0.0f32; av.numel()];
                for (r, src) in idx.iter().enumerate() {
                    if let Some(s) = *src {
                        let s = s as usize;
                        for (o, &v) in d[s * cols..(s + 1) * cols].iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *o += v;
                        }
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::PixelShuffle(a, r) => {
                let s = self.value(*a).shape();
                let (h, w, c) = (s[0], s[1], s[2] / (r * r));
                let mut d = vec![0.0f32; gd.len()];
                for_each_shuffle(h, w, c, *r, |src, dst| d[src] = gd[dst]);
                self.acc(grads, *a, d);
            }
            Op::Csc(q, v) => {
                let (qv, vv) = (self.value(*q), self.value(*v));
                let (nw, n, c) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let mut dq = vec![0.0f32; qv.numel()];
                let mut dv = vec![0.0f32; vv.numel()];
                let mut corr = vec![0.0f32; c * c];
                let mut dcorr = vec![0.0f32; c * c];
                let inv = 1.0 / n as f32;
                for wi in 0..nw {
                    let range = wi * n * c..(wi + 1) * n * c;
                    let (qs, vs, gs) = (&qv.data()[range.clone()], &vv.data()[range.clone()], &gd[range.clone()]);
                    csc_corr(qs, vs, n, c, &mut corr);
                    // out = v · corrᵀ  ⇒  dv += g · corr,  dcorr = gᵀ · v
                    dcorr.iter_mut().for_each(|x| *x = 0.0);
                    kernels::matmul_at_acc(gs, vs, n, c, c, &mut dcorr);
                    let dv_direct = kernels::matmul(gs, &corr, n, c, c);
                    // corr = qᵀv / n  ⇒  dq = v · dcorrᵀ / n,  dv += q · dcorr / n
                    let dq_w = kernels::matmul_bt(vs, &dcorr, n, c, c);
                    let dv_corr = kernels::matmul(qs, &dcorr, n, c, c);
                    for j in 0..n * c {
                        dq[range.start + j] = dq_w[j] * inv;
                        dv[range.start + j] = dv_direct[j] + dv_corr[j] * inv;
                    }
                }
                if self.ng(*q) {
                    self.acc(grads, *q, dq);
                }
                if self.ng(*v) {
                    self.acc(grads, *v, dv);
                }
            }
            Op::SumRows(a) => {
                let av = self.value(*a);
                let (rows, cols) = av.rows_cols();
                let mut d = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    d.extend_from_slice(gd);
                }
                self.acc(grads, *a, d);
            }
            Op::DivRows(num, den) => {
                let (nv, dv) = (self.value(*num), self.value(*den));
                let (rows, cols) = nv.rows_cols();
                if self.ng(*num) {
                    let mut d = gd.to_vec();
                    for r in 0..rows {
                        let inv = 1.0 / dv.data()[r];
                        for o in &mut d[r * cols..(r + 1) * cols] {
                            *o *= inv;
                        }
                    }
                    self.acc(grads, *num, d);
                }
                if self.ng(*den) {
                    let mut d = vec![0.0f32; rows];
                    for r in 0..rows {
                        let den_r = dv.data()[r];
                        let s = kernels::dot(&gd[r * cols..(r + 1) * cols], &nv.data()[r * cols..(r + 1) * cols]);
                        d[r] = -s / (den_r * den_r);
                    }
                    self.acc(grads, *den, d);
                }
            }
            Op::Reshape(a) => {
                self.acc(grads, *a, gd.to_vec());
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.acc(grads, *a, vec![gd[0]; n]);
            }
            Op::SumSquares(a) => {
                let d = self.value(*a).data().iter().map(|&x| 2.0 * x * gd[0]).collect();
                self.acc(grads, *a, d);
            }
            Op::L1 { pred, sign } => {
                let k = gd[0] / sign.len().max(1) as f32;
                self.acc(grads, *pred, sign.iter().map(|s| s * k).collect());
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, d: Vec<f32>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(&d) {
                    *a += *b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.value(v).shape().to_vec(), d).expect("gradient shape"));
            }
        }
    }
}

fn transpose_data(d: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = d[i * c + j];
        }
    }
    out
}

/// `corr[a, b] = Σ_t q[t, a] · v[t, b] / n`
fn csc_corr(q: &[f32], v: &[f32], n: usize, c: usize, corr: &mut [f32]) {
    corr.iter_mut().for_each(|x| *x = 0.0);
    kernels::matmul_at_acc(q, v, n, c, c, corr);
    let inv = 1.0 / n as f32;
    corr.iter_mut().for_each(|x| *x *= inv);
}

/// Visits `(source flat index, destination flat index)` pairs of a pixel shuffle.
fn for_each_shuffle(h: usize, w: usize, c: usize, r: usize, mut f: impl FnMut(usize, usize)) {
    let (ow, cr) = (w * r, c * r * r);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let src = (y * w + x) * cr + ch * r * r + dy * r + dx;
                        let dst = ((y * r + dy) * ow + x * r + dx) * c + ch;
                        f(src, dst);
                    }
                }
            }
        }
    }
}
