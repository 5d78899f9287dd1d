//! Raw dense kernels over row-major slices.
//!
//! Every kernel fixes its accumulation order, so results are bitwise
//! reproducible whether or not the row-parallel paths are taken.

use crate::parallel;

/// Rows below which the row-parallel paths stay sequential.
const PAR_MIN_WORK: usize = 1 << 16;

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if n == 0 {
        return out;
    }
    let row = |i: usize, orow: &mut [f32]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    parallel::for_each_row(&mut out, n, m * k * n >= PAR_MIN_WORK, row);
    out
}

/// `out[m×k] = g[m×n] · b[k×n]ᵀ`
pub fn matmul_bt(g: &[f32], b: &[f32], m: usize, n: usize, k: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * k];
    if k == 0 {
        return out;
    }
    let row = |i: usize, orow: &mut [f32]| {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, o) in orow.iter_mut().enumerate() {
            *o = dot(grow, &b[kk * n..(kk + 1) * n]);
        }
    };
    parallel::for_each_row(&mut out, k, m * k * n >= PAR_MIN_WORK, row);
    out
}

/// `out[k×n] += a[m×k]ᵀ · g[m×n]`, accumulated in row order of `a`.
pub fn matmul_at_acc(a: &[f32], g: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Four independent lanes keep the loop vectorizable with a fixed order.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Geometry of a same-padded HWC convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvShape {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvShape {
    fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }
    fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }
    pub fn out_dims(&self) -> (usize, usize) {
        (self.out_h(), self.out_w())
    }
}

/// Repacks `[cout, cin, k, k]` weights into per-tap `[k·k][cin][cout]` blocks.
fn pack_taps(w: &[f32], s: &ConvShape) -> Vec<f32> {
    let kk = s.k * s.k;
    let mut taps = vec![0.0f32; kk * s.cin * s.cout];
    for co in 0..s.cout {
        for ci in 0..s.cin {
            for t in 0..kk {
                taps[(t * s.cin + ci) * s.cout + co] = w[(co * s.cin + ci) * kk + t];
            }
        }
    }
    taps
}

/// Cross-correlation of an `h×w×cin` map with `[cout, cin, k, k]` weights.
pub fn conv2d(x: &[f32], w: &[f32], bias: &[f32], s: &ConvShape) -> Vec<f32> {
    let taps = pack_taps(w, s);
    let (oh, ow) = s.out_dims();
    let mut out = vec![0.0f32; oh * ow * s.cout];
    let row = |p: usize, orow: &mut [f32]| {
        let (y, x0) = (p / ow, p % ow);
        orow.copy_from_slice(bias);
        for ky in 0..s.k {
            let sy = y + ky;
            if sy < s.pad || sy - s.pad >= s.h {
                continue;
            }
            let sy = sy - s.pad;
            for kx in 0..s.k {
                let sx = x0 + kx;
                if sx < s.pad || sx - s.pad >= s.w {
                    continue;
                }
                let sx = sx - s.pad;
                let xrow = &x[(sy * s.w + sx) * s.cin..(sy * s.w + sx + 1) * s.cin];
                let tap = &taps[(ky * s.k + kx) * s.cin * s.cout..];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let trow = &tap[ci * s.cout..(ci + 1) * s.cout];
                    for (o, &tv) in orow.iter_mut().zip(trow) {
                        *o += xv * tv;
                    }
                }
            }
        }
    };
    let work = oh * ow * s.k * s.k * s.cin * s.cout;
    parallel::for_each_row(&mut out, s.cout, work >= PAR_MIN_WORK, row);
    out
}

/// Gradients of [`conv2d`]: returns `(dx, dw, db)`.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    s: &ConvShape,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let taps = pack_taps(w, s);
    let (oh, ow) = s.out_dims();
    let kk = s.k * s.k;
    let mut dtaps = vec![0.0f32; kk * s.cin * s.cout];
    let mut db = vec![0.0f32; s.cout];
    let mut dx = need_dx.then(|| vec![0.0f32; s.h * s.w * s.cin]);
    for y in 0..oh {
        for x0 in 0..ow {
            let grow = &g[(y * ow + x0) * s.cout..(y * ow + x0 + 1) * s.cout];
            for (d, &gv) in db.iter_mut().zip(grow) {
                *d += gv;
            }
            for ky in 0..s.k {
                let sy = y + ky;
                if sy < s.pad || sy - s.pad >= s.h {
                    continue;
                }
                let sy = sy - s.pad;
                for kx in 0..s.k {
                    let sx = x0 + kx;
                    if sx < s.pad || sx - s.pad >= s.w {
                        continue;
                    }
                    let sx = sx - s.pad;
                    let base = (sy * s.w + sx) * s.cin;
                    let t = ky * s.k + kx;
                    for ci in 0..s.cin {
                        let xv = x[base + ci];
                        let off = (t * s.cin + ci) * s.cout;
                        let drow = &mut dtaps[off..off + s.cout];
                        if xv != 0.0 {
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            dx[base + ci] += dot(grow, &taps[off..off + s.cout]);
                        }
                    }
                }
            }
        }
    }
    let mut dw = vec![0.0f32; w.len()];
    for co in 0..s.cout {
        for ci in 0..s.cin {
            for t in 0..kk {
                dw[(co * s.cin + ci) * kk + t] = dtaps[(t * s.cin + ci) * s.cout + co];
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise same-padded convolution of an `h×w×c` map with `[c, 1, k, k]` weights.
pub fn depthwise_conv2d(x: &[f32], w: &[f32], bias: &[f32], h: usize, wd: usize, c: usize, k: usize) -> Vec<f32> {
    let pad = k / 2;
    let kk = k * k;
    let mut out = vec![0.0f32; h * wd * c];
    for y in 0..h {
        for x0 in 0..wd {
            let orow = &mut out[(y * wd + x0) * c..(y * wd + x0 + 1) * c];
            orow.copy_from_slice(bias);
            for ky in 0..k {
                let Some(sy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(sx) = (x0 + kx).checked_sub(pad).filter(|&v| v < wd) else {
                        continue;
                    };
                    let xrow = &x[(sy * wd + sx) * c..(sy * wd + sx + 1) * c];
                    let t = ky * k + kx;
                    for ch in 0..c {
                        orow[ch] += xrow[ch] * w[ch * kk + t];
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`depthwise_conv2d`]: `(dx, dw, db)`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    h: usize,
    wd: usize,
    c: usize,
    k: usize,
    need_dx: bool,
) -> (Option<Vec<f32>>, Vec<f32>, Vec<f32>) {
    let pad = k / 2;
    let kk = k * k;
    let mut dw = vec![0.0f32; c * kk];
    let mut db = vec![0.0f32; c];
    let mut dx = need_dx.then(|| vec![0.0f32; h * wd * c]);
    for y in 0..h {
        for x0 in 0..wd {
            let grow = &g[(y * wd + x0) * c..(y * wd + x0 + 1) * c];
            for (d, &gv) in db.iter_mut().zip(grow) {
                *d += gv;
            }
            for ky in 0..k {
                let Some(sy) = (y + ky).checked_sub(pad).filter(|&v| v < h) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(sx) = (x0 + kx).checked_sub(pad).filter(|&v| v < wd) else {
                        continue;
                    };
                    let base = (sy * wd + sx) * c;
                    let t = ky * k + kx;
                    for ch in 0..c {
                        dw[ch * kk + t] += x[base + ch] * grow[ch];
                        if let Some(dx) = dx.as_mut() {
                            dx[base + ch] += w[ch * kk + t] * grow[ch];
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Vec<f32> = (0..15).map(|v| (v as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..20).map(|v| (v as f32 * 0.11).cos()).collect();
        let got = matmul(&a, &b, 3, 5, 4);
        let want = naive_matmul(&a, &b, 3, 5, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f32> = (0..12).map(|v| v as f32 - 5.0).collect(); // 3x4
        let g: Vec<f32> = (0..6).map(|v| v as f32 * 0.5).collect(); // 3x2
        let mut at_g = vec![0.0; 8];
        matmul_at_acc(&a, &g, 3, 4, 2, &mut at_g);
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        assert_eq!(at_g, naive_matmul(&at, &g, 4, 3, 2));
        let b: Vec<f32> = (0..8).map(|v| v as f32).collect(); // 4x2
        let got = matmul_bt(&g, &b, 3, 2, 4);
        let mut bt = vec![0.0; 8];
        for i in 0..4 {
            for j in 0..2 {
                bt[j * 4 + i] = b[i * 2 + j];
            }
        }
        assert_eq!(got, naive_matmul(&g, &bt, 3, 2, 4));
    }
}
