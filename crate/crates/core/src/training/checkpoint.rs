//! Binary checkpoint container.
//!
//! Layout (little-endian): magic, version `u32`, JSON header (`u32` length),
//! parameter directory with `f32` blobs, optional optimizer moments,
//! optional RNG state, and a trailing SHA-256 of everything before it.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::optim::{Adam, AdamConfig, Moments};
use super::TrainConfig;
use crate::diff::{ParamId, Tensor};
use crate::model::{InteractModel, ModelConfig, ModelError};

pub const MAGIC: &[u8; 8] = b"INTRCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt checkpoint payload: {0}")]
    Corrupt(String),
    #[error("parameter {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter {0} missing from checkpoint")]
    MissingParam(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    adam: Option<AdamConfig>,
    frozen: Vec<String>,
    epoch: usize,
    config_hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: Option<TrainConfig>,
    pub epoch: usize,
    pub params: Vec<(String, Tensor<f32>)>,
    pub optimizer: Option<Adam<f32>>,
    pub rng: Option<ChaCha8Rng>,
    pub config_hash: String,
}

/// SHA-256 (hex) of the model and training configuration JSON.
pub fn config_hash(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(model).expect("config serializes"));
    if let Some(t) = train {
        h.update(serde_json::to_vec(t).expect("config serializes"));
    }
    hex(&h.finalize())
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture(
        model: &InteractModel<f32>,
        train: Option<&TrainConfig>,
        optimizer: Option<&Adam<f32>>,
        rng: Option<&ChaCha8Rng>,
        epoch: usize,
    ) -> Self {
        let store = model.store();
        Self {
            model_config: model.config().clone(),
            train_config: train.cloned(),
            epoch,
            params: store
                .ids()
                .map(|id| (store.name(id).to_string(), store.get(id).clone()))
                .collect(),
            optimizer: optimizer.cloned(),
            rng: rng.cloned(),
            config_hash: config_hash(model.config(), train),
        }
    }

    /// Copies weights into `model`, which must have the same parameters.
    pub fn apply_to(&self, model: &mut InteractModel<f32>) -> Result<(), CheckpointError> {
        let store = model.store_mut();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| CheckpointError::MissingParam(name.clone()))?;
            if t.shape() != store.get(id).shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: store.get(id).shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            store.set(id, t.clone()).expect("shape checked");
        }
        Ok(())
    }

    pub fn to_model(&self) -> Result<InteractModel<f32>, CheckpointError> {
        let mut m = InteractModel::new(self.model_config.clone())?;
        self.apply_to(&mut m)?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = Header {
            model: self.model_config.clone(),
            train: self.train_config.clone(),
            adam: self.optimizer.as_ref().map(|a| a.cfg.clone()),
            frozen: self
                .optimizer
                .as_ref()
                .map(|a| a.frozen.iter().map(|id| self.params[id.0].0.clone()).collect())
                .unwrap_or_default(),
            epoch: self.epoch,
            config_hash: self.config_hash.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(adam) => {
                out.push(1);
                for slot in &adam.state {
                    match slot {
                        None => out.push(0),
                        Some(mo) => {
                            out.push(1);
                            out.extend_from_slice(&mo.step.to_le_bytes());
                            put_f32s(&mut out, mo.m.data());
                            put_f32s(&mut out, mo.v.data());
                        }
                    }
                }
            }
        }
        match &self.rng {
            None => out.push(0),
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.get_seed());
                out.extend_from_slice(&r.get_stream().to_le_bytes());
                out.extend_from_slice(&r.get_word_pos().to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut r = Reader {
            buf: bytes,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CheckpointError::Corrupt("checksum mismatch".into()));
        }
        r.buf = body;
        let hlen = r.u32()? as usize;
        let header: Header =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("parameter name".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let data = r.f32s(shape.iter().product())?;
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            params.push((name, t));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let mut state = Vec::with_capacity(n);
                for (_, p) in &params {
                    state.push(match r.u8()? {
                        0 => None,
                        _ => {
                            let step = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                            let m = Tensor::new(p.shape(), r.f32s(p.len())?).expect("shape");
                            let v = Tensor::new(p.shape(), r.f32s(p.len())?).expect("shape");
                            Some(Moments { step, m, v })
                        }
                    });
                }
                let frozen: BTreeSet<ParamId> = header
                    .frozen
                    .iter()
                    .filter_map(|f| params.iter().position(|(n, _)| n == f).map(ParamId))
                    .collect();
                Some(Adam {
                    cfg: header.adam.clone().unwrap_or_default(),
                    state,
                    frozen,
                })
            }
            f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            _ => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(pos);
                Some(rng)
            }
        };
        if r.pos != body.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            model_config: header.model,
            train_config: header.train,
            epoch: header.epoch,
            params,
            optimizer,
            rng,
            config_hash: header.config_hash,
        })
    }
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Corrupt("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{GradStore, Tensor};
    use crate::model::VariantName;
    use rand::RngCore;

    fn small(seed: u64) -> ModelConfig {
        ModelConfig {
            embed_dim: 8,
            layers: 1,
            heads: 2,
            seed,
            variant: VariantName::Interact,
            ..ModelConfig::default()
        }
    }

    fn sample() -> (InteractModel<f32>, Checkpoint) {
        let mut model = InteractModel::<f32>::new(small(1)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), model.store());
        let mut g = GradStore::new(model.store());
        let id = model.store().id("head.w").unwrap();
        let shape = model.store().get(id).shape().to_vec();
        g.accumulate(id, &Tensor::new(&shape, vec![0.5; shape.iter().product()]).unwrap());
        adam.frozen.insert(model.store().id("fut_h.b").unwrap());
        adam.step(model.store_mut(), &g, 1e-3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.set_stream(3);
        rng.next_u64();
        let ck = Checkpoint::capture(&model, Some(&TrainConfig::default()), Some(&adam), Some(&rng), 4);
        (model, ck)
    }

    #[test]
    fn bytes_roundtrip() {
        let (model, ck) = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.epoch, 4);
        assert_eq!(back.config_hash, ck.config_hash);
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.train_config, ck.train_config);
        let restored = back.to_model().unwrap();
        for id in model.store().ids() {
            assert_eq!(model.store().get(id), restored.store().get(id));
        }
    }

    #[test]
    fn distinct_errors() {
        let (_, ck) = sample();
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() / 2]),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut flipped = bytes.clone();
        flipped[200] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&flipped),
            Err(CheckpointError::Corrupt(_))
        ));
        let mut v2 = bytes.clone();
        v2[8..12].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&v2),
            Err(CheckpointError::Version { found: 2, expected: 1 })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"garbage"),
            Err(CheckpointError::BadMagic)
        ));

        let mut other = InteractModel::<f32>::new(ModelConfig {
            embed_dim: 16,
            ..small(1)
        })
        .unwrap();
        match ck.apply_to(&mut other) {
            Err(CheckpointError::ShapeMismatch { name, .. }) => assert_eq!(name, "hist_h.w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_roundtrip() {
        let (_, ck) = sample();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/model.ckpt");
        save_checkpoint(&ck, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
    }
}
