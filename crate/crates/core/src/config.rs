//! Run configuration: presets, TOML/JSON files, `section.key=value`
//! overrides, hashing, and ablation transforms.

use crate::eval::MetricOptions;
use crate::layer::FfnKind;
use crate::model::{ModelConfig, UpsamplerKind};
use crate::optim::{LrSchedule, OptimError};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    BadValue { key: String, msg: String },
    #[error("malformed override `{0}` (expected section.key=value)")]
    BadOverride(String),
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error("unknown ablation `{0}` (expected one of v1.1, v2.1, v3.1, v3.2, v3.3, v3.4)")]
    UnknownAblation(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Optimization settings of one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub epochs: usize,
    pub warmup: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch: usize,
    /// Patches drawn per training image per epoch.
    pub repeat: usize,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Validate every this many epochs (and always after the last).
    pub val_every: usize,
    /// Store Adam moments in the checkpoint so training can resume.
    pub save_optimizer: bool,
}

impl StagePlan {
    pub fn stage1() -> Self {
        Self {
            epochs: 700,
            warmup: 50,
            lr_max: 4e-4,
            lr_min: 1e-6,
            batch: 16,
            repeat: 1,
            grad_clip: 0.0,
            val_every: 10,
            save_optimizer: false,
        }
    }

    pub fn stage2() -> Self {
        Self {
            epochs: 300,
            lr_max: 1e-5,
            ..Self::stage1()
        }
    }

    pub fn schedule(&self) -> std::result::Result<LrSchedule, OptimError> {
        LrSchedule::new(self.lr_max, self.lr_min, self.warmup, self.epochs)
    }
}

impl Default for StagePlan {
    fn default() -> Self {
        Self::stage1()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Training images (`<dir>/hr/*.png`); empty means `$C2D_DATA_ROOT/train`
    /// when that variable is set, else procedurally generated images.
    pub train_dir: String,
    /// Validation images, resolved like `train_dir` (`…/val`).
    pub val_dir: String,
    /// LR patch side.
    pub patch: usize,
    /// HR pixels supervised per stage-1 item.
    pub q_count: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub synth_seed: u64,
    pub synth_train: usize,
    pub synth_train_size: usize,
    pub synth_val: usize,
    pub synth_val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: String::new(),
            val_dir: String::new(),
            patch: 64,
            q_count: 1024,
            scale_min: 1.0,
            scale_max: 4.0,
            synth_seed: 0,
            synth_train: 800,
            synth_train_size: 256,
            synth_val: 16,
            synth_val_size: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// Continuous pre-training before fine-tuning. When off, the discrete
    /// model trains from scratch for both stages' epochs with the stage-1
    /// learning-rate bounds and warm-up.
    pub c2d: bool,
    /// Ablation transform already applied, for the record.
    pub ablation: String,
    pub model: ModelConfig,
    pub train1: StagePlan,
    pub train2: StagePlan,
    pub data: DataConfig,
    pub eval: MetricOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        preset("desk").expect("desk preset")
    }
}

pub const PRESETS: &[&str] = &[
    "desk",
    "swinir-c2d-x2",
    "swinir-c2d-x3",
    "swinir-c2d-x4",
    "srformer-c2d-x2",
    "srformer-c2d-x3",
    "srformer-c2d-x4",
];

pub const ABLATIONS: &[&str] = &["v1.1", "v2.1", "v3.1", "v3.2", "v3.3", "v3.4"];

/// Named configurations. The full-scale presets use the published backbone
/// sizes; `desk` is the small CPU protocol.
pub fn preset(name: &str) -> Result<RunConfig> {
    let full = |ffn: FfnKind, scale: usize| RunConfig {
        name: name.to_string(),
        seed: 0,
        c2d: true,
        ablation: String::new(),
        model: ModelConfig {
            ffn,
            scale,
            ..ModelConfig::default()
        },
        train1: StagePlan::stage1(),
        train2: StagePlan::stage2(),
        data: DataConfig::default(),
        eval: MetricOptions::default(),
    };
    Ok(match name {
        "desk" => RunConfig {
            name: name.to_string(),
            seed: 0,
            c2d: true,
            ablation: String::new(),
            model: ModelConfig {
                channels: 16,
                blocks: 1,
                windows: vec![16, 8, 4, 4, 8, 16],
                scale: 2,
                ..ModelConfig::default()
            },
            train1: StagePlan {
                epochs: 30,
                warmup: 2,
                lr_max: 2e-3,
                lr_min: 1e-5,
                batch: 2,
                repeat: 1,
                val_every: 10,
                ..StagePlan::stage1()
            },
            train2: StagePlan {
                epochs: 15,
                warmup: 0,
                lr_max: 1e-3,
                lr_min: 1e-5,
                batch: 1,
                repeat: 1,
                val_every: 5,
                ..StagePlan::stage2()
            },
            data: DataConfig {
                patch: 32,
                q_count: 4096,
                synth_seed: 1,
                synth_train: 64,
                synth_train_size: 128,
                synth_val: 16,
                synth_val_size: 96,
                ..DataConfig::default()
            },
            eval: MetricOptions::default(),
        },
        "swinir-c2d-x2" => full(FfnKind::Mlp, 2),
        "swinir-c2d-x3" => full(FfnKind::Mlp, 3),
        "swinir-c2d-x4" => full(FfnKind::Mlp, 4),
        "srformer-c2d-x2" => full(FfnKind::ConvFfn, 2),
        "srformer-c2d-x3" => full(FfnKind::ConvFfn, 3),
        "srformer-c2d-x4" => full(FfnKind::ConvFfn, 4),
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    })
}

fn unknown_field(msg: &str) -> Option<String> {
    let start = msg.find("unknown field `")? + "unknown field `".len();
    let len = msg[start..].find('`')?;
    Some(msg[start..start + len].to_string())
}

fn parse_err(msg: String) -> ConfigError {
    match unknown_field(&msg) {
        Some(k) => ConfigError::UnknownKey(k),
        None => ConfigError::Parse(msg),
    }
}

impl RunConfig {
    /// A preset name, or a `.toml` / `.json` file applied over the defaults.
    pub fn load(spec: &str) -> Result<Self> {
        let path = Path::new(spec);
        if !path.exists() {
            if PRESETS.contains(&spec) {
                return preset(spec);
            }
            return Err(ConfigError::Read {
                path: spec.to_string(),
                msg: "no such file or preset".into(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: spec.to_string(),
            msg: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_err(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies `section.key=value` overrides. Values are parsed as TOML
    /// literals, falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = toml::Value::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.to_string()))?;
            let key = key.trim();
            let raw = raw.trim();
            let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
                Ok(mut t) => t.remove("v").expect("parsed value"),
                Err(_) => toml::Value::String(raw.to_string()),
            };
            let mut node = &mut tree;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                let slot = table.get_mut(*part).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
                if i + 1 == parts.len() {
                    *slot = coerce(slot, value.clone());
                }
                node = slot;
            }
        }
        Self::deserialize(tree).map_err(|e| match unknown_field(&e.to_string()) {
            Some(k) => ConfigError::UnknownKey(k),
            None => ConfigError::BadValue {
                key: overrides.iter().map(|o| o.as_ref().to_string()).collect::<Vec<_>>().join(" "),
                msg: e.to_string(),
            },
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, p) in [("train1", &self.train1), ("train2", &self.train2)] {
            p.schedule().map_err(|e| ConfigError::Invalid(format!("{name}: {e}")))?;
            if p.batch == 0 || p.repeat == 0 || p.val_every == 0 {
                return Err(ConfigError::Invalid(format!("{name}: batch, repeat and val_every must be positive")));
            }
        }
        if !(2..=4).contains(&self.model.scale) {
            return Err(ConfigError::Invalid(format!("discrete scale must be 2, 3 or 4, got {}", self.model.scale)));
        }
        let d = &self.data;
        if d.patch == 0 || d.q_count == 0 {
            return Err(ConfigError::Invalid("data.patch and data.q_count must be positive".into()));
        }
        if !(1.0 <= d.scale_min && d.scale_min <= d.scale_max && d.scale_max <= 4.0) {
            return Err(ConfigError::Invalid(format!(
                "continuous scale range [{}, {}] must lie in [1, 4]",
                d.scale_min, d.scale_max
            )));
        }
        Ok(())
    }

    /// Model of the given stage: 1 continuous, 2 discrete.
    pub fn stage_model(&self, stage: u8) -> ModelConfig {
        ModelConfig {
            upsampler: if stage == 1 {
                UpsamplerKind::Continuous
            } else {
                UpsamplerKind::Discrete
            },
            ..self.model.clone()
        }
    }

    pub fn hash(&self) -> u64 {
        hash_json(self)
    }
}

/// Keeps integer-typed slots integer when a float literal such as `2.0` is
/// given, and float slots float for integer literals.
fn coerce(old: &toml::Value, new: toml::Value) -> toml::Value {
    match (old, &new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        (toml::Value::Integer(_), toml::Value::Float(f)) if f.fract() == 0.0 => toml::Value::Integer(*f as i64),
        _ => new,
    }
}

/// First 8 bytes (little-endian) of SHA-256 over the JSON serialization.
pub fn hash_json<T: Serialize>(v: &T) -> u64 {
    let bytes = serde_json::to_vec(v).expect("serializable");
    let digest = Sha256::digest(&bytes);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn model_hash(m: &ModelConfig) -> u64 {
    hash_json(m)
}

/// Window-profile and feature ablations as pure config transforms.
pub fn apply_ablation(cfg: &RunConfig, name: &str) -> Result<RunConfig> {
    let mut out = cfg.clone();
    let w = &cfg.model.windows;
    match name {
        "v1.1" => out.c2d = false,
        "v2.1" => out.model.hier_encoding = false,
        "v3.1" => out.model.unet = false,
        "v3.2" => {
            let min = w.iter().copied().min().unwrap_or(1);
            out.model.windows = w.iter().map(|&s| if s > min { s / 2 } else { s }).collect();
        }
        "v3.3" => {
            let split = w.len().div_ceil(2);
            let (enc, dec) = w.split_at(split);
            out.model.windows = enc.iter().rev().chain(dec.iter().rev()).copied().collect();
        }
        "v3.4" => {
            let max = cfg.model.max_window();
            out.model.windows = vec![max; w.len()];
        }
        other => return Err(ConfigError::UnknownAblation(other.to_string())),
    }
    out.ablation = name.to_string();
    out.name = format!("{}+{name}", cfg.name);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = preset("srformer-c2d-x4").unwrap();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let err = RunConfig::from_toml("[model]\nchanels = 3\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "chanels"), "{err}");
        let err = RunConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(ref k) if k == "bogus"));
    }

    #[test]
    fn overrides_apply_and_reject_unknown() {
        let c = RunConfig::default();
        let o = c
            .with_overrides(&["model.channels=8", "train1.lr_max=1", "data.train_dir=/x/y", "model.ffn=conv_ffn"])
            .unwrap();
        assert_eq!(o.model.channels, 8);
        assert_eq!(o.train1.lr_max, 1.0);
        assert_eq!(o.data.train_dir, "/x/y");
        assert_eq!(o.model.ffn, FfnKind::ConvFfn);
        assert_ne!(o.hash(), c.hash());
        assert!(matches!(c.with_overrides(&["model.nope=1"]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.with_overrides(&["nosuch=1"]), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(c.with_overrides(&["model.channels"]), Err(ConfigError::BadOverride(_))));
        assert!(matches!(c.with_overrides(&["model.channels=abc"]), Err(ConfigError::BadValue { .. })));
    }

    #[test]
    fn ablation_profiles() {
        let mut c = preset("swinir-c2d-x4").unwrap();
        let w = |n: &str, c: &RunConfig| apply_ablation(c, n).unwrap().model.windows;
        assert_eq!(w("v3.2", &c), vec![32, 16, 8, 8, 16, 32]);
        assert_eq!(w("v3.3", &c), vec![8, 32, 64, 64, 32, 8]);
        assert_eq!(w("v3.4", &c), vec![64; 6]);
        assert!(!apply_ablation(&c, "v1.1").unwrap().c2d);
        assert!(!apply_ablation(&c, "v2.1").unwrap().model.hier_encoding);
        assert!(!apply_ablation(&c, "v3.1").unwrap().model.unet);
        assert!(apply_ablation(&c, "v9").is_err());
        c.model.windows = vec![16, 8, 4, 4, 8, 16];
        assert_eq!(w("v3.2", &c), vec![8, 4, 4, 4, 4, 8]);
    }

    #[test]
    fn every_preset_validates() {
        for p in PRESETS {
            preset(p).unwrap().validate().unwrap();
        }
    }
}
