//! Run configuration files, overrides and hashing.

use c2d_core::config::{preset, ConfigError, RunConfig, PRESETS};
use proptest::prelude::*;

/// Overrides that each change exactly one semantically meaningful field.
const EDITS: &[&str] = &[
    "seed=7",
    "c2d=false",
    "model.channels=18",
    "model.blocks=2",
    "model.windows=[16, 8, 8, 16]",
    "model.ffn_ratio=3",
    "model.ffn=conv_ffn",
    "model.hier_encoding=false",
    "model.unet=false",
    "model.image_skip=false",
    "model.attn_heads=2",
    "train1.epochs=31",
    "train1.lr_max=3e-3",
    "train2.batch=3",
    "train2.save_optimizer=true",
    "data.patch=24",
    "data.q_count=100",
    "data.synth_seed=9",
    "eval.on_y=false",
];

#[test]
fn each_field_moves_the_hash() {
    let base = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    seen.insert(base.hash());
    for e in EDITS {
        let c = base.with_overrides(&[e]).unwrap();
        assert!(seen.insert(c.hash()), "{e} did not change the hash");
    }
}

#[test]
fn files_roundtrip_through_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    for name in PRESETS {
        let c = preset(name).unwrap();
        let toml_path = dir.path().join(format!("{name}.toml"));
        std::fs::write(&toml_path, c.to_toml()).unwrap();
        assert_eq!(RunConfig::load(toml_path.to_str().unwrap()).unwrap(), c);
        let json_path = dir.path().join(format!("{name}.json"));
        std::fs::write(&json_path, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(RunConfig::load(json_path.to_str().unwrap()).unwrap(), c);
    }
    assert!(matches!(RunConfig::load("no-such-preset"), Err(ConfigError::Read { .. })));
    assert!(matches!(preset("no-such-preset"), Err(ConfigError::UnknownPreset(_))));
}

#[test]
fn partial_files_fill_in_defaults() {
    let c = RunConfig::from_toml("seed = 3\n[model]\nchannels = 8\n").unwrap();
    assert_eq!((c.seed, c.model.channels), (3, 8));
    // missing keys inside a table take that table's own default
    assert_eq!(c.model.blocks, c2d_core::model::ModelConfig::default().blocks);
    assert_eq!(c.data, RunConfig::default().data);
}

proptest! {
    #[test]
    fn overrides_survive_a_toml_roundtrip(seed in 0u64..1000, ch in 1usize..20, lr in 1e-5f64..1e-2) {
        let c = RunConfig::default()
            .with_overrides(&[format!("seed={seed}"), format!("model.channels={}", 2 * ch), format!("train1.lr_max={lr:e}")])
            .unwrap();
        prop_assert_eq!(c.model.channels, 2 * ch);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(back.hash(), c.hash());
        prop_assert_eq!(back, c);
    }
}
