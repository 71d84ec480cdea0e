//! Named-tensor container.
//!
//! Layout: the 8-byte magic `MTLRTNSR`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every tensor's values back to back as
//! little-endian `f64` or `f32` in header order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 8] = b"MTLRTNSR";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("unsupported container: {0}")]
    Unsupported(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    F32,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: DType,
    config_hash: String,
    metadata: serde_json::Value,
    tensors: Vec<Entry>,
}

/// An ordered set of named tensors plus free-form JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor)>,
    pub config_hash: String,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn write_container<W: Write>(w: &mut W, c: &Container, dtype: DType) -> Result<(), ContainerError> {
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype,
        config_hash: c.config_hash.clone(),
        metadata: c.metadata.clone(),
        tensors: c
            .tensors
            .iter()
            .map(|(name, t)| Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, t) in &c.tensors {
        buf.clear();
        for &v in t.data() {
            match dtype {
                DType::F64 => buf.extend_from_slice(&v.to_le_bytes()),
                DType::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<Container, ContainerError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::Unsupported(format!(
            "format version {}",
            header.format_version
        )));
    }
    let width = match header.dtype {
        DType::F64 => 8,
        DType::F32 => 4,
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let mut raw = vec![0u8; n * width];
        r.read_exact(&mut raw)?;
        let data: Vec<f64> = match header.dtype {
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
        };
        let t = Tensor::new(e.shape, data).map_err(|err| ContainerError::Unsupported(err.to_string()))?;
        tensors.push((e.name, t));
    }
    Ok(Container {
        tensors,
        config_hash: header.config_hash,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        Container {
            tensors: vec![
                ("a".into(), Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1)),
                ("b".into(), Tensor::scalar(-2.5)),
            ],
            config_hash: "abc".into(),
            metadata: serde_json::json!({"d": 4}),
        }
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let c = sample();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &c, DType::F64).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = read_container(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let c = sample();
        let mut bytes = Vec::new();
        write_container(&mut bytes, &c, DType::F32).unwrap();
        let back = read_container(&mut bytes.as_slice()).unwrap();
        assert!(back.get("a").unwrap().max_abs_diff(c.get("a").unwrap()) < 1e-6);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOTMAGIC\0\0\0\0\0\0\0\0".to_vec();
        assert!(matches!(
            read_container(&mut bytes.as_slice()),
            Err(ContainerError::BadMagic)
        ));
    }
}
