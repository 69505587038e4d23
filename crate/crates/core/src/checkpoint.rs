//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic       8 bytes  "CTRLCKPT"
//! version     u32      1
//! config      u32 byte length, then UTF-8 `key=value\n` lines (model config)
//! vocab       u32 count, then per token: u32 byte length + UTF-8 bytes
//!             (non-reserved tokens in id order, ids start at 2)
//! records     u32 count, then per parameter in registry order:
//!               u32 name length + UTF-8 name
//!               u8  group (0 EMB, 1 CNN, 2 CTRL, 3 FC)
//!               u8  trainable (0 or 1)
//!               u32 rank, then rank × u64 dims
//!               product(dims) × f64 values, row-major
//! digest      32 bytes SHA-256 of everything above
//! ```
//!
//! The container holds no timestamps or paths, so identical models always
//! serialize to identical bytes.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::layers::Group;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CTRLCKPT";
const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub group: Group,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub records: Vec<Record>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn config_text(config: &ModelConfig) -> String {
    config
        .to_pairs()
        .into_iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

/// Serializes a model together with the vocabulary it was trained with.
pub fn to_bytes(model: &Model, vocab: &Vocab) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config_text(model.config()));
    put_u32(&mut out, vocab.entries().len());
    for tok in vocab.entries() {
        put_str(&mut out, tok);
    }
    let params = model.params();
    put_u32(&mut out, params.len());
    for p in params {
        put_str(&mut out, &p.name);
        out.push(p.group.code());
        out.push(u8::from(p.trainable));
        put_u32(&mut out, p.value.shape().len());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_values(&mut out, &p.value);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

/// Raw value bytes of every parameter in `groups`, in registry order. Used to
/// assert that frozen groups did not move.
pub fn group_bytes(model: &Model, groups: &[Group]) -> Vec<u8> {
    let mut out = Vec::new();
    for p in model.params().into_iter().filter(|p| groups.contains(&p.group)) {
        put_str(&mut out, &p.name);
        put_values(&mut out, &p.value);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Checkpoint("digest mismatch; file is corrupted".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let text = r.string()?;
        let pairs = text
            .lines()
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.split_once('=')
                    .ok_or_else(|| Error::Checkpoint(format!("bad config line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let config = ModelConfig::from_pairs(pairs)?;
        let n_tokens = r.u32()?;
        let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
        let vocab = Vocab::from_tokens(tokens);
        if vocab.len() != n_tokens + 2 {
            return Err(Error::Checkpoint("vocabulary contains duplicates".into()));
        }
        let n = r.u32()?;
        let mut records = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let group = Group::from_code(r.u8()?)
                .ok_or_else(|| Error::Checkpoint(format!("bad group code for `{name}`")))?;
            let trainable = r.u8()? != 0;
            let rank = r.u32()?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Checkpoint(format!("bad shape for `{name}`")))?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
            records.push(Record {
                name,
                group,
                trainable,
                value,
            });
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after records".into()));
        }
        Ok(Checkpoint {
            config,
            vocab,
            records,
        })
    }

    /// Copies the stored tensors into `model`. Fails on the first tensor
    /// whose name, group or shape disagrees with the model.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        let mut params = model.params_mut();
        for (i, p) in params.iter_mut().enumerate() {
            let Some(rec) = self.records.get(i) else {
                return Err(Error::TensorMismatch {
                    name: p.name.clone(),
                    msg: "missing from checkpoint".into(),
                });
            };
            if rec.name != p.name {
                return Err(Error::TensorMismatch {
                    name: p.name.clone(),
                    msg: format!("checkpoint has `{}` in its place", rec.name),
                });
            }
            if rec.group != p.group || rec.value.shape() != p.value.shape() {
                return Err(Error::TensorMismatch {
                    name: p.name.clone(),
                    msg: format!(
                        "checkpoint {} {:?} vs model {} {:?}",
                        rec.group,
                        rec.value.shape(),
                        p.group,
                        p.value.shape()
                    ),
                });
            }
            p.value = rec.value.clone();
            p.trainable = rec.trainable;
        }
        if let Some(extra) = self.records.get(params.len()) {
            return Err(Error::TensorMismatch {
                name: extra.name.clone(),
                msg: "not present in the model".into(),
            });
        }
        Ok(())
    }

    /// Builds the model described by the stored config and loads it.
    pub fn into_model(self) -> Result<(Model, Vocab)> {
        let mut model = Model::build(&self.config)?;
        self.apply_to(&mut model)?;
        Ok((model, self.vocab))
    }
}

pub fn save(path: impl AsRef<Path>, model: &Model, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, vocab)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
