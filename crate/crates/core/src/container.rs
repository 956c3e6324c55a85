//! Binary container shared by embedding tables, precomputed features and
//! checkpoints.
//!
//! Layout: 9 magic bytes, a little-endian `u64` header length, a JSON header
//! (`{"meta": .., "tensors": [{"name", "shape", "offset"}]}`) and finally the
//! tensors as one contiguous row-major little-endian `f32` payload. `offset`
//! counts elements from the start of the payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC_LEN: usize = 9;
pub const EMBEDDING_MAGIC: &[u8; MAGIC_LEN] = b"MMRL-EMB1";
pub const FEATURE_MAGIC: &[u8; MAGIC_LEN] = b"MMRL-FEA1";
pub const CHECKPOINT_MAGIC: &[u8; MAGIC_LEN] = b"MMRL-CKP1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// A named f32 tensor held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!(
                "tensor shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { name: name.into(), shape, data })
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn tensor(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` missing from container")))
    }

    pub fn write_to(&self, magic: &[u8; MAGIC_LEN], mut w: impl Write) -> Result<()> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            entries.push(TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset });
            offset += t.data.len();
        }
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors: entries })?;
        w.write_all(magic)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let mut buf = Vec::with_capacity(offset * 4);
        for t in &self.tensors {
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(magic: &[u8; MAGIC_LEN], mut r: impl Read) -> Result<Self> {
        let mut got = [0u8; MAGIC_LEN];
        r.read_exact(&mut got)?;
        if &got != magic {
            return Err(Error::Format(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(&got)
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() % 4 != 0 {
            return Err(Error::Format("payload is not a whole number of f32 values".into()));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n;
            if end > floats.len() {
                return Err(Error::Format(format!("tensor `{}` runs past end of payload", e.name)));
            }
            tensors.push(NamedTensor {
                name: e.name,
                shape: e.shape,
                data: floats[e.offset..end].to_vec(),
            });
        }
        Ok(Self { meta: header.meta, tensors })
    }

    pub fn save(&self, magic: &[u8; MAGIC_LEN], path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(magic, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(magic: &[u8; MAGIC_LEN], path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(magic, std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_magic_length_header_payload() {
        let c = Container {
            meta: serde_json::json!({"k": 1}),
            tensors: vec![NamedTensor::new("a", vec![2], vec![1.0, -2.5]).unwrap()],
        };
        let mut buf = Vec::new();
        c.write_to(EMBEDDING_MAGIC, &mut buf).unwrap();
        assert_eq!(&buf[..9], b"MMRL-EMB1");
        let hlen = u64::from_le_bytes(buf[9..17].try_into().unwrap()) as usize;
        let payload = &buf[17 + hlen..];
        assert_eq!(payload, [1.0f32.to_le_bytes(), (-2.5f32).to_le_bytes()].concat());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let c = Container { meta: serde_json::Value::Null, tensors: vec![] };
        let mut buf = Vec::new();
        c.write_to(FEATURE_MAGIC, &mut buf).unwrap();
        assert!(matches!(
            Container::read_from(CHECKPOINT_MAGIC, buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(NamedTensor::new("x", vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn roundtrip(data in proptest::collection::vec(-1e6f32..1e6, 0..64), rows in 1usize..4) {
            let n = data.len() - data.len() % rows;
            let t = NamedTensor::new("t", vec![rows, n / rows], data[..n].to_vec()).unwrap();
            let c = Container { meta: serde_json::json!({"x": "y"}), tensors: vec![t.clone(), t] };
            let mut buf = Vec::new();
            c.write_to(CHECKPOINT_MAGIC, &mut buf).unwrap();
            let back = Container::read_from(CHECKPOINT_MAGIC, buf.as_slice()).unwrap();
            proptest::prop_assert_eq!(back.tensors, c.tensors);
            proptest::prop_assert_eq!(back.meta, c.meta);
        }
    }
}
