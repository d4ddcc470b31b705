//! Binary tensor container for parameters and optimizer state.
//!
//! Layout: magic, format version (u32), metadata length (u64) and JSON
//! metadata, tensor count (u64), then per tensor the name length (u32),
//! UTF-8 name, rank (u32), each extent (u64) and the values as
//! little-endian f64. All integers are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderDims, EncoderParams};
use crate::error::{Error, Result};
use crate::optim::{Adam, Moments};

pub const MAGIC: &[u8; 8] = b"VBRIDGE\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

impl TensorFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(bad(format!("tensor {} has shape {:?} but {} values", t.name, t.shape, t.data.len())));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &e in &t.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = read_u64(&mut r)? as usize;
        if meta_len > r.len() {
            return Err(bad("truncated metadata"));
        }
        let meta = serde_json::from_slice(&r[..meta_len])?;
        r = &r[meta_len..];
        let count = read_u64(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > r.len() {
                return Err(bad("truncated tensor name"));
            }
            let name = String::from_utf8(r[..name_len].to_vec()).map_err(|_| bad("tensor name is not UTF-8"))?;
            r = &r[name_len..];
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            if n.checked_mul(8).is_none_or(|b| b > r.len()) {
                return Err(bad(format!("truncated data for {name}")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            r = &r[n * 8..];
            tensors.push(NamedTensor { name, shape, data });
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamsMeta {
    kind: String,
    dims: EncoderDims,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Encoder parameters plus free-form metadata.
pub fn params_to_file(params: &EncoderParams, extra: serde_json::Value) -> Result<TensorFile> {
    let meta = serde_json::to_value(ParamsMeta {
        kind: "encoder".into(),
        dims: params.dims,
        extra,
    })?;
    let tensors = params
        .tensors()
        .into_iter()
        .zip(params.shapes())
        .map(|((info, data), shape)| NamedTensor {
            name: info.name,
            shape,
            data: data.to_vec(),
        })
        .collect();
    Ok(TensorFile { meta, tensors })
}

pub fn params_from_file(file: &TensorFile) -> Result<(EncoderParams, serde_json::Value)> {
    let meta: ParamsMeta = serde_json::from_value(file.meta.clone())?;
    if meta.kind != "encoder" {
        return Err(bad(format!("expected an encoder checkpoint, found {}", meta.kind)));
    }
    meta.dims.check()?;
    let mut params = EncoderParams::zeros(meta.dims);
    let shapes = params.shapes();
    let slots = params.tensors_mut();
    if slots.len() != file.tensors.len() {
        return Err(bad(format!("expected {} tensors, found {}", slots.len(), file.tensors.len())));
    }
    for (((info, dst), shape), t) in slots.into_iter().zip(shapes).zip(&file.tensors) {
        if info.name != t.name || shape != t.shape {
            return Err(bad(format!("expected {} {:?}, found {} {:?}", info.name, shape, t.name, t.shape)));
        }
        dst.copy_from_slice(&t.data);
    }
    Ok((params, meta.extra))
}

pub fn save_params(params: &EncoderParams, extra: serde_json::Value, path: &Path) -> Result<()> {
    params_to_file(params, extra)?.save(path)
}

pub fn load_params(path: &Path) -> Result<(EncoderParams, serde_json::Value)> {
    params_from_file(&TensorFile::load(path)?)
}

/// Adam moments for trainable tensors under `adam.m.*` / `adam.v.*`.
pub fn optimizer_to_file(opt: &Adam, params: &EncoderParams) -> Result<TensorFile> {
    let meta = serde_json::json!({
        "kind": "adam",
        "step": opt.step,
        "weight_decay": opt.weight_decay,
    });
    let mut tensors = Vec::new();
    for ((info, data), slot) in params.tensors().into_iter().zip(&opt.moments) {
        if let Some(Moments { m, v }) = slot {
            for (prefix, values) in [("adam.m.", m), ("adam.v.", v)] {
                tensors.push(NamedTensor {
                    name: format!("{prefix}{}", info.name),
                    shape: vec![data.len()],
                    data: values.clone(),
                });
            }
        }
    }
    Ok(TensorFile { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::TrainConfig;

    #[test]
    fn round_trip_is_bit_identical() {
        let dims = EncoderDims::from_config(&TrainConfig::default());
        let p = EncoderParams::random_dense(dims, 0.5, &mut substream(3, "init", 0)).unwrap();
        let bytes = params_to_file(&p, serde_json::json!({"epoch": 2})).unwrap().to_bytes().unwrap();
        let (q, extra) = params_from_file(&TensorFile::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(extra["epoch"], 2);
        for ((_, a), (_, b)) in p.tensors().into_iter().zip(q.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(params_to_file(&q, extra).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_garbage() {
        assert!(TensorFile::from_bytes(b"nope").is_err());
        let mut bytes = TensorFile {
            meta: serde_json::Value::Null,
            tensors: vec![],
        }
        .to_bytes()
        .unwrap();
        bytes.push(0);
        assert!(TensorFile::from_bytes(&bytes).is_err());
    }
}
