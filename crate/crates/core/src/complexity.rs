//! Closed-form parameter and multiply-accumulate counts.
//!
//! MACs follow the forward pass exactly: the extractor runs at the
//! window-padded LR extents, each attention layer at its own window-padded
//! extents, and the head at the cropped LR (discrete) or on every HR query
//! (continuous). One FLOP is reported per MAC, the usual convention in
//! super-resolution model tables.

use crate::encodings::WindowGeometry;
use crate::layer::{FfnKind, HietLayer, WindowPartition};
use crate::model::{Model, ModelConfig, Result, UpsamplerKind};
use serde::Serialize;

/// FLOPs counted per multiply-accumulate.
pub const FLOPS_PER_MAC: u64 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ComplexityReport {
    pub lr_extents: (usize, usize),
    pub padded_extents: (usize, usize),
    pub out_extents: (usize, usize),
    pub modules: Vec<ModuleCost>,
}

impl ComplexityReport {
    pub fn params(&self) -> usize {
        self.modules.iter().map(|m| m.params).sum()
    }

    pub fn macs(&self) -> u64 {
        self.modules.iter().map(|m| m.macs).sum()
    }

    pub fn flops(&self) -> u64 {
        self.macs() * FLOPS_PER_MAC
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "lr {}x{} (padded {}x{}) -> {}x{}\n",
            self.lr_extents.0,
            self.lr_extents.1,
            self.padded_extents.0,
            self.padded_extents.1,
            self.out_extents.0,
            self.out_extents.1
        );
        for m in &self.modules {
            s += &format!("{:<16} {:>12} params {:>16} MACs\n", m.name, m.params, m.macs);
        }
        s += &format!(
            "total            {:>12} params {:>16} MACs ({:.2}K params, {:.2}G FLOPs)\n",
            self.params(),
            self.macs(),
            self.params() as f64 / 1e3,
            self.flops() as f64 / 1e9
        );
        s
    }
}

/// Total trainable parameters of the model `cfg` describes.
pub fn count_params(cfg: &ModelConfig) -> Result<usize> {
    Ok(Model::extractor_param_count(cfg)? + Model::upsampler_param_count(cfg))
}

/// MACs of one attention layer at `h×w`.
pub fn layer_macs(cfg: &ModelConfig, window: usize, h: usize, w: usize) -> u64 {
    let c = cfg.channels as u64;
    let px = (h * w) as u64;
    let enc = if cfg.hier_encoding { 2 } else { 0 };
    let part = WindowPartition::new(&WindowGeometry::clamped(window, w, h));
    let padded_px = (part.padded_h * part.padded_w) as u64;
    let half = c / 2;
    let hidden = cfg.ffn_ratio as u64 * c;
    let embed = px * (c + enc) * c;
    let csc = 2 * padded_px * half * half;
    let proj = px * half * c;
    let ffn = px * c * hidden * 2;
    let dw = match cfg.ffn {
        FfnKind::Mlp => 0,
        FfnKind::ConvFfn => px * (cfg.ffn_kernel * cfg.ffn_kernel) as u64 * hidden,
    };
    embed + csc + proj + ffn + dw
}

/// Cost of producing an `out_h×out_w` image at scale `s`. The LR input is
/// `⌈out/s⌉` on each axis.
pub fn count_complexity(cfg: &ModelConfig, out_h: usize, out_w: usize, s: f64) -> Result<ComplexityReport> {
    cfg.validate()?;
    let c = cfg.channels as u64;
    let h = (out_h as f64 / s - 1e-9).ceil().max(1.0) as usize;
    let w = (out_w as f64 / s - 1e-9).ceil().max(1.0) as usize;
    let (ph, pw) = cfg.padded_extents(h, w);
    let ppx = (ph * pw) as u64;
    let sched = cfg.schedule()?;
    let lopts = cfg.layer_options();
    let layer_params = HietLayer::param_count(cfg.channels, &lopts);

    let mut modules = vec![ModuleCost {
        name: "shallow".into(),
        params: 27 * cfg.channels + cfg.channels,
        macs: ppx * 27 * c,
    }];
    for b in 0..cfg.blocks {
        let mut params = 0;
        let mut macs = 0;
        for &win in sched.encoder.iter().chain(&sched.decoder) {
            params += layer_params;
            macs += layer_macs(cfg, win, ph, pw);
        }
        if cfg.unet {
            params += sched.decoder.len() * (2 * cfg.channels * cfg.channels + cfg.channels);
            macs += sched.decoder.len() as u64 * ppx * 2 * c * c;
        }
        if cfg.block_conv {
            params += 9 * cfg.channels * cfg.channels + cfg.channels;
            macs += ppx * 9 * c * c;
        }
        modules.push(ModuleCost {
            name: format!("block{b}"),
            params,
            macs,
        });
    }
    modules.push(ModuleCost {
        name: "deep_conv".into(),
        params: 9 * cfg.channels * cfg.channels + cfg.channels,
        macs: ppx * 9 * c * c,
    });
    let head_macs = match cfg.upsampler {
        UpsamplerKind::Discrete => (h * w) as u64 * 9 * c * 3 * (cfg.scale * cfg.scale) as u64,
        UpsamplerKind::Continuous => {
            let n = (out_h * out_w) as u64;
            let dh = c / cfg.attn_heads as u64;
            let attn = 4 * n * c * c + cfg.attn_heads as u64 * (2 * n * dh * dh + n * dh);
            n * (c + 4) * c + attn + n * (c + 2) * c + n * c * 3
        }
    };
    modules.push(ModuleCost {
        name: "upsampler".into(),
        params: Model::upsampler_param_count(cfg),
        macs: head_macs,
    });
    Ok(ComplexityReport {
        lr_extents: (h, w),
        padded_extents: (ph, pw),
        out_extents: (out_h, out_w),
        modules,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(kind: UpsamplerKind, ffn: FfnKind) -> ModelConfig {
        ModelConfig {
            channels: 8,
            blocks: 2,
            windows: vec![4, 2, 2, 4],
            ffn,
            ffn_kernel: 3,
            upsampler: kind,
            scale: 2,
            attn_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn analytic_macs_equal_graph_tally() {
        for kind in [UpsamplerKind::Discrete, UpsamplerKind::Continuous] {
            for ffn in [FfnKind::Mlp, FfnKind::ConvFfn] {
                let cfg = toy(kind, ffn);
                let m = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                let lr = Tensor::from_fn([5, 7, 3], |i| (i % 5) as f32 * 0.2);
                let mut g = Graph::with_params(m.params());
                let x = g.input(lr);
                match kind {
                    UpsamplerKind::Discrete => {
                        m.forward_discrete(&mut g, x).unwrap();
                    }
                    UpsamplerKind::Continuous => {
                        let q = crate::model::QueryBatch::full_grid(2.0, 5, 7).unwrap();
                        m.forward_continuous(&mut g, x, &q).unwrap();
                    }
                }
                let r = count_complexity(&cfg, 10, 14, 2.0).unwrap();
                assert_eq!(r.lr_extents, (5, 7));
                assert_eq!(r.padded_extents, (8, 8));
                assert_eq!(r.macs(), g.macs(), "{kind:?} {ffn:?}");
                assert_eq!(r.params(), m.params().num_scalars());
            }
        }
    }
}
