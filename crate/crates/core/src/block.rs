//! U-Net style arrangement of hierarchical-encoding layers.
//!
//! The encoder shrinks the attention window layer by layer, the decoder grows
//! it back. Feature resolution never changes; decoder layer `k` reads the
//! previous decoder output (or the bottom encoder output for `k = 0`) and the
//! encoder output of the paired level, fused by a 1×1 convolution.

use crate::layer::{apply_conv, ConvIds, HietLayer, LayerOptions, ParamBuilder};
use crate::tensor::{Graph, Result, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("window schedule is empty")]
    Empty,
    #[error("window size must be at least 1, got {0:?}")]
    ZeroWindow(Vec<usize>),
}

/// Window sizes of the encoder and decoder halves of a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    /// Non-fatal findings: sizes clamped to the patch, non-monotone halves.
    pub warnings: Vec<String>,
}

impl WindowSchedule {
    /// Encoder level fused into decoder layer `k`.
    pub fn paired_encoder(&self, k: usize) -> usize {
        self.decoder.len() - 1 - k
    }

    pub fn len(&self) -> usize {
        self.encoder.len() + self.decoder.len()
    }

    pub fn is_empty(&self) -> bool {
        self.encoder.is_empty()
    }
}

/// Splits a flat window profile into encoder (first `⌈n/2⌉`) and decoder
/// (remaining) halves, clamping any size larger than the patch.
pub fn build_window_schedule(spec: &[usize], patch: (usize, usize)) -> std::result::Result<WindowSchedule, ScheduleError> {
    if spec.is_empty() {
        return Err(ScheduleError::Empty);
    }
    if spec.contains(&0) {
        return Err(ScheduleError::ZeroWindow(spec.to_vec()));
    }
    let mut warnings = Vec::new();
    let limit = patch.0.max(patch.1).max(1);
    let sizes: Vec<usize> = spec
        .iter()
        .map(|&s| {
            if s > limit {
                warnings.push(format!("window {s} exceeds {}x{} patch, clamped to {limit}", patch.0, patch.1));
                limit
            } else {
                s
            }
        })
        .collect();
    let split = sizes.len().div_ceil(2);
    let (enc, dec) = sizes.split_at(split);
    if enc.windows(2).any(|p| p[1] > p[0]) {
        warnings.push(format!("encoder windows {enc:?} are not non-increasing"));
    }
    if dec.windows(2).any(|p| p[1] < p[0]) {
        warnings.push(format!("decoder windows {dec:?} are not non-decreasing"));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(WindowSchedule {
        encoder: enc.to_vec(),
        decoder: dec.to_vec(),
        warnings,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    /// U-Net fusion; `false` gives the plain sequential chain.
    pub unet: bool,
    /// Trailing 3×3 conv inside the block.
    pub block_conv: bool,
    /// Add the block input to its output.
    pub residual: bool,
}

impl Default for BlockOptions {
    fn default() -> Self {
        Self {
            unet: true,
            block_conv: true,
            residual: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HietBlock {
    pub channels: usize,
    pub schedule: WindowSchedule,
    pub opts: BlockOptions,
    pub encoder: Vec<HietLayer>,
    pub decoder: Vec<HietLayer>,
    pub fuse: Vec<ConvIds>,
    pub conv: Option<ConvIds>,
}

impl HietBlock {
    pub fn new<R: Rng>(
        pb: &mut ParamBuilder<'_, R>,
        prefix: &str,
        channels: usize,
        schedule: WindowSchedule,
        layer: LayerOptions,
        opts: BlockOptions,
    ) -> Self {
        let encoder = schedule
            .encoder
            .iter()
            .enumerate()
            .map(|(i, &w)| HietLayer::new(pb, &format!("{prefix}.enc{i}"), channels, w, layer))
            .collect();
        let mut decoder = Vec::new();
        let mut fuse = Vec::new();
        for (i, &w) in schedule.decoder.iter().enumerate() {
            if opts.unet {
                fuse.push(pb.conv(&format!("{prefix}.fuse{i}"), 2 * channels, channels, 1));
            }
            decoder.push(HietLayer::new(pb, &format!("{prefix}.dec{i}"), channels, w, layer));
        }
        let conv = opts
            .block_conv
            .then(|| pb.conv(&format!("{prefix}.conv"), channels, channels, 3));
        Self {
            channels,
            schedule,
            opts,
            encoder,
            decoder,
            fuse,
            conv,
        }
    }

    pub fn param_count(channels: usize, schedule: &WindowSchedule, layer: &LayerOptions, opts: &BlockOptions) -> usize {
        let c = channels;
        let layers = schedule.len() * HietLayer::param_count(c, layer);
        let fuse = if opts.unet {
            schedule.decoder.len() * (2 * c * c + c)
        } else {
            0
        };
        let conv = if opts.block_conv { 9 * c * c + c } else { 0 };
        layers + fuse + conv
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let body = if self.opts.unet {
            self.unet_body(g, x)?
        } else {
            self.linear_chain_body(g, x)?
        };
        self.finish(g, x, body)
    }

    /// Sequential composition of the same layers with no fusion.
    pub fn linear_chain_forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let body = self.linear_chain_body(g, x)?;
        self.finish(g, x, body)
    }

    fn finish(&self, g: &mut Graph, x: Var, body: Var) -> Result<Var> {
        let mut out = body;
        if let Some(conv) = self.conv {
            out = apply_conv(g, out, conv)?;
        }
        if self.opts.residual {
            out = g.add(x, out)?;
        }
        Ok(out)
    }

    fn linear_chain_body(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in self.encoder.iter().chain(&self.decoder) {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }

    fn unet_body(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if self.fuse.len() != self.decoder.len() {
            return Err(TensorError::BadShape {
                op: "hiet_block",
                msg: format!("{} fusion convs for {} decoder layers", self.fuse.len(), self.decoder.len()),
            });
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(g, h)?;
            skips.push(h);
        }
        for (k, layer) in self.decoder.iter().enumerate() {
            let skip = skips[self.schedule.paired_encoder(k)];
            let cat = g.concat_cols(&[h, skip])?;
            let fused = apply_conv(g, cat, self.fuse[k])?;
            h = layer.forward(g, fused)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_layer_profile_splits_symmetrically() {
        let s = build_window_schedule(&[64, 32, 8, 8, 32, 64], (64, 64)).unwrap();
        assert_eq!(s.encoder, vec![64, 32, 8]);
        assert_eq!(s.decoder, vec![8, 32, 64]);
        assert!(s.warnings.is_empty());
        assert_eq!((0..3).map(|k| s.paired_encoder(k)).collect::<Vec<_>>(), vec![2, 1, 0]);
    }

    #[test]
    fn five_layer_profile_has_longer_encoder() {
        let s = build_window_schedule(&[64, 32, 8, 32, 64], (64, 64)).unwrap();
        assert_eq!(s.encoder, vec![64, 32, 8]);
        assert_eq!(s.decoder, vec![32, 64]);
        assert_eq!(s.encoder[s.paired_encoder(0)], 32);
        assert_eq!(s.encoder[s.paired_encoder(1)], 64);
    }

    #[test]
    fn desk_profile_and_clamping() {
        let s = build_window_schedule(&[16, 8, 4, 4, 8, 16], (32, 32)).unwrap();
        assert_eq!(s.encoder, vec![16, 8, 4]);
        assert_eq!(s.decoder, vec![4, 8, 16]);
        let s = build_window_schedule(&[64, 32, 8, 8, 32, 64], (32, 32)).unwrap();
        assert_eq!(s.encoder, vec![32, 32, 8]);
        assert_eq!(s.warnings.len(), 2);
    }

    #[test]
    fn degenerate_and_invalid_profiles() {
        let s = build_window_schedule(&[4], (8, 8)).unwrap();
        assert_eq!(s.encoder, vec![4]);
        assert!(s.decoder.is_empty());
        assert_eq!(build_window_schedule(&[], (8, 8)), Err(ScheduleError::Empty));
        assert!(build_window_schedule(&[4, 0], (8, 8)).is_err());
        let rev = build_window_schedule(&[8, 32, 64, 64, 32, 8], (64, 64)).unwrap();
        assert_eq!(rev.warnings.len(), 2);
    }
}
