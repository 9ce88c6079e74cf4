//! Binary checkpoints: mapper parameters, optimizer moments and the
//! configuration they were trained under. The byte layout is described in
//! `docs/checkpoint.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::mapper::HairMapperParams;
use crate::optim::Adam;

pub const MAGIC: &[u8; 8] = b"HAIRMAP\0";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "hmck";

const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";
const MAPPER_PREFIX: &str = "mapper.";

/// Loop state needed to resume training exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Word position of the task-sampling RNG stream.
    #[serde(with = "u128_string")]
    pub rng_word_pos: u128,
    pub smoothed_total: Option<f64>,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub config_hash: String,
    pub config: Config,
    pub progress: TrainProgress,
    pub adam_step: Option<u64>,
}

impl CheckpointMeta {
    pub fn is_untrained(&self) -> bool {
        self.iteration == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: HairMapperParams,
    pub optimizer: Option<Adam>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut Cursor<&[u8]>) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_bytes(r: &mut Cursor<&[u8]>, n: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if n > remaining {
        return Err(corrupt("truncated file"));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b).map_err(|_| corrupt("truncated file"))?;
    Ok(b)
}

fn put_tensor(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: &Config, params: HairMapperParams, optimizer: Option<Adam>, progress: TrainProgress) -> Self {
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                iteration: params.iterations_trained,
                config_hash: config.hash(),
                config: config.clone(),
                progress,
                adam_step: optimizer.as_ref().map(|a| a.step),
            },
            params,
            optimizer,
        }
    }

    /// An untrained checkpoint for `config`, initialized from its seed.
    pub fn initial(config: &Config) -> Result<Self> {
        config.validate()?;
        let d = &config.dims;
        let params = HairMapperParams::init(d.latent_dim, d.embed_dim, config.partition()?, &config.mapper, config.seed);
        Ok(Self::new(
            config,
            params,
            None,
            TrainProgress {
                rng_word_pos: 0,
                smoothed_total: None,
            },
        ))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let tensors = self.params.tensors();
        let count = tensors.len() + if self.optimizer.is_some() { 2 } else { 0 };
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, values) in &tensors {
            put_tensor(&mut out, &format!("{MAPPER_PREFIX}{name}"), values);
        }
        if let Some(adam) = &self.optimizer {
            put_tensor(&mut out, ADAM_M, &adam.first_moment);
            put_tensor(&mut out, ADAM_V, &adam.second_moment);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a hairmap checkpoint"));
        }
        let mut r = Cursor::new(bytes);
        r.set_position(MAGIC.len() as u64);
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let meta_len = read_u32(&mut r)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(&read_bytes(&mut r, meta_len)?)
            .map_err(|e| corrupt(format!("bad metadata: {e}")))?;
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let n = read_u64(&mut r)? as usize;
            let raw = read_bytes(&mut r, n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if tensors.insert(name.clone(), values).is_some() {
                return Err(corrupt(format!("duplicate tensor {name}")));
            }
        }
        if r.position() as usize != bytes.len() {
            return Err(corrupt("trailing bytes after last tensor"));
        }

        let config = &meta.config;
        config.validate()?;
        let d = &config.dims;
        let mut params = HairMapperParams::zeros(d.latent_dim, d.embed_dim, config.partition()?, &config.mapper);
        params.iterations_trained = meta.iteration;
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        params.for_each_tensor_mut(|name, slot| match tensors.remove(&format!("{MAPPER_PREFIX}{name}")) {
            Some(v) if v.len() == slot.len() => slot.copy_from_slice(&v),
            Some(_) => mismatched.push(name),
            None => missing.push(name),
        });
        if let Some(name) = missing.first() {
            return Err(corrupt(format!("missing tensor {MAPPER_PREFIX}{name}")));
        }
        if let Some(name) = mismatched.first() {
            return Err(corrupt(format!("tensor {MAPPER_PREFIX}{name} has the wrong length")));
        }
        let optimizer = match (tensors.remove(ADAM_M), tensors.remove(ADAM_V), meta.adam_step) {
            (Some(m), Some(v), Some(step)) => {
                let n = params.num_parameters();
                if m.len() != n || v.len() != n {
                    return Err(corrupt("optimizer moments have the wrong length"));
                }
                let t = &config.train;
                let mut adam = Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps, n);
                adam.step = step;
                adam.first_moment = m;
                adam.second_moment = v;
                Some(adam)
            }
            (None, None, None) => None,
            _ => return Err(corrupt("incomplete optimizer state")),
        };
        if let Some(name) = tensors.keys().next() {
            return Err(corrupt(format!("unexpected tensor {name}")));
        }
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Saves as `ckpt-<iteration>.hmck` in `dir` and returns the path.
    pub fn save_in(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(file_name(self.meta.iteration));
        self.save(&path)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

pub fn file_name(iteration: u64) -> String {
    format!("ckpt-{iteration:08}.{EXTENSION}")
}

/// The checkpoint with the highest iteration in `dir`, if any.
pub fn latest_in(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(it) = name
            .strip_prefix("ckpt-")
            .and_then(|s| s.strip_suffix(&format!(".{EXTENSION}")))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|(b, _)| it > *b) {
            best = Some((it, path));
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Dims;

    fn config() -> Config {
        let mut c = Config::default();
        c.dims = Dims {
            layers: 3,
            latent_dim: 4,
            embed_dim: 5,
            height: 8,
            width: 8,
        };
        c
    }

    #[test]
    fn round_trip_without_optimizer() {
        let ck = Checkpoint::initial(&config()).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        assert!(back.meta.is_untrained());
    }

    #[test]
    fn round_trip_with_optimizer() {
        let c = config();
        let mut ck = Checkpoint::initial(&c).unwrap();
        let n = ck.params.num_parameters();
        let t = &c.train;
        let mut adam = Adam::new(t.learning_rate, t.adam_beta1, t.adam_beta2, t.adam_eps, n);
        adam.step = 7;
        adam.first_moment = (0..n).map(|i| i as f64 * 0.5).collect();
        adam.second_moment = (0..n).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        ck.params.iterations_trained = 7;
        ck = Checkpoint::new(
            &c,
            ck.params,
            Some(adam),
            TrainProgress {
                rng_word_pos: u128::MAX - 3,
                smoothed_total: Some(1.25),
            },
        );
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn header_layout() {
        let bytes = Checkpoint::initial(&config()).unwrap().to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        assert_eq!(meta["iteration"], 0);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::initial(&config()).unwrap().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(Error::Checkpoint(_))));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Checkpoint(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn latest_picks_highest_iteration() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(latest_in(dir.path()).unwrap(), None);
        let c = config();
        let mut ck = Checkpoint::initial(&c).unwrap();
        for it in [0, 20, 3] {
            ck.meta.iteration = it;
            ck.save_in(dir.path()).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let latest = latest_in(dir.path()).unwrap().unwrap();
        assert!(latest.ends_with(file_name(20)));
        assert_eq!(Checkpoint::load(&latest).unwrap().params.iterations_trained, 20);
    }
}
