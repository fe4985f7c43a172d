//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header (config, dtype, step, parameter
//! name/shape table in flat order), then the raw little-endian parameter,
//! first-moment and second-moment arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{DType, ModelConfig};
use super::params::ModelState;
use super::scalar::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"OPSDLCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: DType,
    step: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes<T: Scalar>(state: &ModelState<T>) -> Vec<u8> {
    let header = Header {
        version: FORMAT_VERSION,
        dtype: T::DTYPE,
        step: state.step,
        config: state.config.clone(),
        tensors: state
            .layout()
            .specs()
            .iter()
            .map(|s| TensorEntry {
                name: s.name.clone(),
                shape: s.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + 3 * state.params.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for arr in [&state.params, &state.m, &state.v] {
        for &x in arr.iter() {
            x.put_le(&mut out);
        }
    }
    out
}

/// A checkpoint whose element type is only known at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyState {
    F32(ModelState<f32>),
    F64(ModelState<f64>),
}

impl AnyState {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyState::F32(s) => &s.config,
            AnyState::F64(s) => &s.config,
        }
    }

    /// The state with element type `T`; fails if the checkpoint stores another type.
    pub fn into_typed<T: Scalar>(self) -> Result<ModelState<T>> {
        fn cast<A: Scalar, B: Scalar>(s: ModelState<A>) -> Result<ModelState<B>> {
            let conv = |v: Vec<A>| v.into_iter().map(|x| B::of(x.f64())).collect();
            ModelState::from_parts(s.config.clone(), conv(s.params), conv(s.m), conv(s.v), s.step)
        }
        if self.config().dtype != T::DTYPE {
            return Err(Error::Config(format!(
                "checkpoint stores {:?}, expected {:?}",
                self.config().dtype,
                T::DTYPE
            )));
        }
        match self {
            AnyState::F32(s) => cast(s),
            AnyState::F64(s) => cast(s),
        }
    }
}

fn read_array<T: Scalar>(bytes: &[u8], n: usize) -> Vec<T> {
    bytes.chunks_exact(T::BYTES).take(n).map(T::get_le).collect()
}

fn parse_typed<T: Scalar>(header: Header, body: &[u8]) -> Result<ModelState<T>> {
    header.config.validate()?;
    let layout = super::params::Layout::new(&header.config);
    let table_ok = layout.specs().len() == header.tensors.len()
        && layout
            .specs()
            .iter()
            .zip(&header.tensors)
            .all(|(s, e)| s.name == e.name && s.shape == e.shape);
    if !table_ok {
        return Err(Error::Data("checkpoint tensor table does not match its config".into()));
    }
    let n = layout.total();
    if body.len() != 3 * n * T::BYTES {
        return Err(Error::Data(format!(
            "checkpoint body has {} bytes, expected {}",
            body.len(),
            3 * n * T::BYTES
        )));
    }
    let stride = n * T::BYTES;
    ModelState::from_parts(
        header.config,
        read_array(&body[..stride], n),
        read_array(&body[stride..2 * stride], n),
        read_array(&body[2 * stride..], n),
        header.step,
    )
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyState> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Data("not an opsdl checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body_start = 20usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Data("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&bytes[20..body_start])
        .map_err(|e| Error::Data(format!("bad checkpoint header: {e}")))?;
    if header.config.dtype != header.dtype {
        return Err(Error::Data("checkpoint dtype disagrees with its config".into()));
    }
    let body = &bytes[body_start..];
    Ok(match header.dtype {
        DType::F32 => AnyState::F32(parse_typed(header, body)?),
        DType::F64 => AnyState::F64(parse_typed(header, body)?),
    })
}

pub fn save<T: Scalar>(state: &ModelState<T>, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::config::tiny_config;

    #[test]
    fn roundtrip_is_bitwise() {
        let mut state = ModelState::<f64>::init(tiny_config(6, 8, 2), 3).unwrap();
        let grad: Vec<f64> = (0..state.num_params()).map(|i| (i as f64).sin()).collect();
        state.optimizer_step(&grad, 1e-2).unwrap();
        let back = from_bytes(&to_bytes(&state)).unwrap();
        assert_eq!(back, AnyState::F64(state));
    }

    #[test]
    fn f32_roundtrip_and_file_io() {
        let mut cfg = tiny_config(6, 8, 1);
        cfg.dtype = DType::F32;
        let state = ModelState::<f32>::init(cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&state, &path).unwrap();
        assert_eq!(load(&path).unwrap(), AnyState::F32(state));
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(from_bytes(b"hello world, not a checkpoint").is_err());
        let state = ModelState::<f64>::init(tiny_config(6, 8, 1), 3).unwrap();
        let bytes = to_bytes(&state);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Data(_))));
    }
}
