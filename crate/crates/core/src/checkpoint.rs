//! Binary checkpoint format.
//!
//! ```text
//! "C2DK" | u32 version | u64 config hash | u8 stage | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | u32 extents… | f32 data…
//! ```
//! All integers and floats are little-endian.

use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"C2DK";
pub const VERSION: u32 = 1;

/// Prefix of optimizer-state tensors stored alongside the parameters.
pub const ADAM_PREFIX: &str = "adam.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("config hash {found:016x} does not match expected {expected:016x}")]
    HashMismatch { found: u64, expected: u64 },
    #[error("checkpoint is missing tensor {0}")]
    Missing(String),
    #[error("tensor {name}: checkpoint shape {found:?}, model shape {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint stage {found}, expected {expected}")]
    Stage { found: u8, expected: u8 },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub stage: u8,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameters in store order, plus Adam moments when `adam` is given.
    pub fn from_params(params: &ParamStore, config_hash: u64, stage: u8, adam: Option<&AdamState>) -> Self {
        let mut tensors: Vec<(String, Tensor)> = params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(st) = adam {
            for (id, (m, v)) in params.ids().zip(st.m.iter().zip(&st.v)) {
                let name = params.name(id);
                tensors.push((format!("{ADAM_PREFIX}m.{name}"), m.clone()));
                tensors.push((format!("{ADAM_PREFIX}v.{name}"), v.clone()));
            }
            // the step count is exact in f32 up to 2^24 steps
            tensors.push((format!("{ADAM_PREFIX}step"), Tensor::scalar(st.step as f32)));
        }
        Self {
            config_hash,
            stage,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn has_optimizer_state(&self) -> bool {
        self.get(&format!("{ADAM_PREFIX}step")).is_some()
    }

    /// Overwrites every tensor of `params` whose name passes `filter`.
    /// Fails on the first missing or mis-shaped tensor.
    pub fn load_into(&self, params: &mut ParamStore, filter: impl Fn(&str) -> bool) -> Result<usize> {
        let ids: Vec<_> = params.ids().collect();
        let mut n = 0;
        for id in ids {
            let name = params.name(id).to_string();
            if !filter(&name) {
                continue;
            }
            let t = self.get(&name).ok_or_else(|| CheckpointError::Missing(name.clone()))?;
            let want = params.get(id).shape();
            if t.shape() != want {
                return Err(CheckpointError::Shape {
                    found: t.shape().to_vec(),
                    expected: want.to_vec(),
                    name,
                });
            }
            *params.get_mut(id) = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Rebuilds optimizer state for `params`, if the checkpoint carries one.
    pub fn adam_state(&self, params: &ParamStore) -> Result<Option<AdamState>> {
        let Some(step) = self.get(&format!("{ADAM_PREFIX}step")) else {
            return Ok(None);
        };
        let mut st = AdamState::new(params);
        st.step = step.item() as u64;
        for id in params.ids() {
            let name = params.name(id);
            for (slot, kind) in [(&mut st.m, "m"), (&mut st.v, "v")] {
                let key = format!("{ADAM_PREFIX}{kind}.{name}");
                let t = self.get(&key).ok_or_else(|| CheckpointError::Missing(key.clone()))?;
                if t.shape() != params.get(id).shape() {
                    return Err(CheckpointError::Shape {
                        name: key,
                        found: t.shape().to_vec(),
                        expected: params.get(id).shape().to_vec(),
                    });
                }
                slot[id.index()] = t.clone();
            }
        }
        Ok(Some(st))
    }

    pub fn expect_hash(&self, expected: u64) -> Result<()> {
        if self.config_hash != expected {
            return Err(CheckpointError::HashMismatch {
                found: self.config_hash,
                expected,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        out.push(self.stage);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.rank()).map_err(|_| CheckpointError::Malformed(format!("rank of {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in t.shape() {
                let d = u32::try_from(d).map_err(|_| CheckpointError::Malformed(format!("extent of {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config_hash = u64::from_le_bytes(r.take(8, "config hash")?.try_into().unwrap());
        let stage = r.take(1, "stage")?[0];
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(len, "tensor name")?)
                .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let nbytes = numel
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Malformed(format!("extents of {name} overflow")))?;
            let raw = r.take(nbytes, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_hash,
            stage,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut p = ParamStore::new();
        p.add("a.weight", Tensor::from_fn([2, 3], |i| i as f32 * 0.5 - 1.0));
        p.add("a.bias", Tensor::new([1], vec![f32::MIN_POSITIVE]).unwrap());
        let mut st = AdamState::new(&p);
        st.step = 7;
        st.m[0].data_mut()[1] = 0.25;
        Checkpoint::from_params(&p, 0xdead_beef_0123_4567, 1, Some(&st))
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"C2DK");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_and_version_are_reported() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Truncated(_))
        ));
        let mut bumped = bytes.clone();
        bumped[4..8].copy_from_slice(&2u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        let mut junk = bytes;
        junk[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&junk), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn optimizer_state_roundtrip() {
        let c = sample();
        let mut p = ParamStore::new();
        p.add("a.weight", Tensor::zeros([2, 3]));
        p.add("a.bias", Tensor::zeros([1]));
        assert_eq!(c.load_into(&mut p, |_| true).unwrap(), 2);
        let st = c.adam_state(&p).unwrap().unwrap();
        assert_eq!(st.step, 7);
        assert_eq!(st.m[0].data()[1], 0.25);
        assert!(c.expect_hash(1).is_err());
    }
}
