//! Hierarchical binary position codes and query-coordinate geometry.
//!
//! Two codes are used by the network:
//! * a window-relative code over the feature grid, telling each feature which
//!   half of its attention window it sits in along each axis;
//! * a query code over the unit cell of an LR feature, telling an HR query
//!   which half (level 0) or quarter-parity (level 1) of the cell it falls in.
//!
//! Pixel centers sit at `(i + 0.5) / N` in both the LR and HR grids.

use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EncodingError {
    #[error("feature index ({u}, {v}) outside {width}x{height} map")]
    OutOfRange {
        u: usize,
        v: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid window {w}x{h} for {width}x{height} map")]
    BadWindow {
        w: usize,
        h: usize,
        width: usize,
        height: usize,
    },
    #[error("invalid extents or scale: {0}")]
    BadExtents(String),
}

/// Attention window of `w × h` features over a `width × height` feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub w: usize,
    pub h: usize,
    pub width: usize,
    pub height: usize,
}

impl WindowGeometry {
    pub fn new(w: usize, h: usize, width: usize, height: usize) -> Result<Self, EncodingError> {
        if w == 0 || h == 0 || w > width || h > height {
            return Err(EncodingError::BadWindow { w, h, width, height });
        }
        Ok(Self { w, h, width, height })
    }

    /// Square window of side `size`, clamped to the map extents.
    pub fn clamped(size: usize, width: usize, height: usize) -> Self {
        Self {
            w: size.clamp(1, width.max(1)),
            h: size.clamp(1, height.max(1)),
            width,
            height,
        }
    }
}

/// `(⌊2u/w⌋ mod 2, ⌊2v/h⌋ mod 2)` in exact integer arithmetic.
pub fn window_hier_encoding(g: &WindowGeometry, u: usize, v: usize) -> Result<(u8, u8), EncodingError> {
    if u >= g.width || v >= g.height {
        return Err(EncodingError::OutOfRange {
            u,
            v,
            width: g.width,
            height: g.height,
        });
    }
    Ok((((2 * u / g.w) % 2) as u8, ((2 * v / g.h) % 2) as u8))
}

/// The code of every feature as an `H×W×2` plane of `0.0 / 1.0` values;
/// channel 0 is the horizontal bit.
pub fn encoding_plane(g: &WindowGeometry) -> Tensor {
    let mut data = Vec::with_capacity(g.width * g.height * 2);
    for v in 0..g.height {
        let bv = ((2 * v / g.h) % 2) as f32;
        for u in 0..g.width {
            data.push(((2 * u / g.w) % 2) as f32);
            data.push(bv);
        }
    }
    Tensor::new([g.height, g.width, 2], data).expect("plane extents")
}

/// Local coordinate of an HR query inside its LR cell, with hierarchy level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryCoord {
    pub x_local: f32,
    pub y_local: f32,
    pub level: u32,
}

/// `⌊x · 2^{j+1}⌋ mod 2` per axis.
pub fn coord_hier_encoding(q: &QueryCoord) -> (u8, u8) {
    let k = (1u32 << (q.level + 1)) as f64;
    let bit = |x: f32| (((x as f64) * k).floor() as i64).rem_euclid(2) as u8;
    (bit(q.x_local), bit(q.y_local))
}

/// Cell-decoding vector `[2/(sH), 2/(sW)]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellVector(pub [f32; 2]);

pub fn cell_vector(s: f64, h: usize, w: usize) -> Result<CellVector, EncodingError> {
    if h == 0 || w == 0 || !(s > 0.0) || !s.is_finite() {
        return Err(EncodingError::BadExtents(format!("scale {s} with {h}x{w}")));
    }
    Ok(CellVector([
        (2.0 / (s * h as f64)) as f32,
        (2.0 / (s * w as f64)) as f32,
    ]))
}

/// HR extent `⌊s·n⌋`, tolerant of the rounding error in `s·n`.
pub fn scaled_extent(s: f64, n: usize) -> usize {
    (s * n as f64 + 1e-9).floor() as usize
}

/// Nearest LR cell along one axis and the fractional position inside it.
pub fn locate(i: usize, hr_n: usize, lr_n: usize) -> (usize, f32) {
    let pos = (i as f64 + 0.5) / hr_n as f64 * lr_n as f64;
    let cell = (pos.floor() as usize).min(lr_n - 1);
    let local = (pos - cell as f64).clamp(0.0, 1.0 - f64::EPSILON);
    (cell, local as f32)
}

/// Query geometry of every HR pixel of an `⌊sH⌋×⌊sW⌋` output over an `H×W` LR grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGrid {
    pub out_h: usize,
    pub out_w: usize,
    /// `(x_local, y_local)` per HR pixel, row-major.
    pub coords: Vec<[f32; 2]>,
    /// Flat LR index `row·W + col` of the nearest feature per HR pixel.
    pub nearest: Vec<u32>,
}

impl LocalGrid {
    pub fn coords_tensor(&self) -> Tensor {
        let data = self.coords.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new([self.out_h, self.out_w, 2], data).expect("grid extents")
    }
}

pub fn local_coord_grid(s: f64, h: usize, w: usize) -> Result<LocalGrid, EncodingError> {
    if !(s >= 1.0) || !s.is_finite() || h == 0 || w == 0 {
        return Err(EncodingError::BadExtents(format!("scale {s} with {h}x{w}")));
    }
    let (out_h, out_w) = (scaled_extent(s, h), scaled_extent(s, w));
    Ok(grid_for_extents(h, w, out_h, out_w))
}

/// Same as [`local_coord_grid`] but with explicit HR extents.
pub fn grid_for_extents(h: usize, w: usize, out_h: usize, out_w: usize) -> LocalGrid {
    let cols: Vec<(usize, f32)> = (0..out_w).map(|j| locate(j, out_w, w)).collect();
    let mut coords = Vec::with_capacity(out_h * out_w);
    let mut nearest = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let (ry, ly) = locate(i, out_h, h);
        for &(rx, lx) in &cols {
            coords.push([lx, ly]);
            nearest.push((ry * w + rx) as u32);
        }
    }
    LocalGrid {
        out_h,
        out_w,
        coords,
        nearest,
    }
}
