//! Binary checkpoint files.
//!
//! Byte layout, all integers little-endian:
//!
//! | bytes          | content                                        |
//! |----------------|------------------------------------------------|
//! | 0..8           | magic `PELABCK1`                               |
//! | 8..16          | `u64` length `M` of the JSON manifest          |
//! | 16..16+M       | UTF-8 JSON manifest                            |
//! | 16+M..         | blob of `f64` values, 8 bytes each             |
//!
//! The manifest is `{"format":1,"meta":{..},"blob_len":N,"checksum":"..",
//! "tensors":[{"name","shape","offset","trainable"}]}` where `offset` is the
//! byte offset of the tensor inside the blob, `blob_len` is the blob size in
//! bytes and `checksum` is the hex FNV-1a-64 digest of the blob bytes.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PELABCK1";
const FORMAT: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Manifest {
    format: u32,
    meta: serde_json::Value,
    blob_len: u64,
    checksum: String,
    tensors: Vec<Entry>,
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.entries.iter().map(|e| e.name.clone()).zip(self.tensors.iter().cloned()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    /// Copies every stored value into a store with identical names and shapes.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_values(&self.to_map())
    }
}

fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    format!("{h:016x}")
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Contract(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn to_bytes(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(store.numel() * 8);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(Entry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: t.requires_grad(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT,
        meta: meta.clone(),
        blob_len: blob.len() as u64,
        checksum: fnv_hex(&blob),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(16 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let m = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16usize.saturating_add(m))
        .ok_or_else(|| corrupt("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(corrupt(format!("unsupported format {}", manifest.format)));
    }
    let blob = &bytes[16 + m..];
    if blob.len() as u64 != manifest.blob_len {
        return Err(corrupt(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_len)));
    }
    if fnv_hex(blob) != manifest.checksum {
        return Err(corrupt("checksum mismatch"));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = blob
            .get(start..start + n * 8)
            .ok_or_else(|| corrupt(format!("tensor {} outside blob", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let mut t = Tensor::new(&e.shape, data).map_err(|_| corrupt(format!("tensor {} shape", e.name)))?;
        t.set_requires_grad(e.trainable);
        tensors.push(t);
    }
    Ok(Checkpoint {
        meta: manifest.meta,
        entries: manifest.tensors,
        tensors,
    })
}

/// Writes via a temporary sibling file and rename, so a crash never leaves
/// a half-written checkpoint under the final name.
pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.0, 0.1, f64::MIN_POSITIVE, 7.0]).unwrap().with_grad());
        s.add("pe", Tensor::full(&[4], 0.25));
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let meta = serde_json::json!({"step": 3});
        let ck = from_bytes(&to_bytes(&s, &meta).unwrap()).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.entries[1].offset, 48);
        let mut s2 = store();
        s2.get_mut(super::super::ParamId(0)).data_mut().fill(0.0);
        ck.restore_into(&mut s2).unwrap();
        assert_eq!(s.checksum(), s2.checksum());
        assert!(ck.tensors[0].requires_grad());
        assert!(!ck.tensors[1].requires_grad());
    }

    #[test]
    fn layout_matches_documentation() {
        let bytes = to_bytes(&store(), &serde_json::Value::Null).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let m = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let blob = &bytes[16 + m..];
        assert_eq!(blob.len(), 10 * 8);
        assert_eq!(f64::from_le_bytes(blob[8..16].try_into().unwrap()), -2.5);
    }

    #[test]
    fn corruption_is_detected() {
        let good = to_bytes(&store(), &serde_json::Value::Null).unwrap();
        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(from_bytes(&flipped).is_err());
        assert!(from_bytes(&good[..good.len() - 3]).is_err());
        assert!(from_bytes(b"garbage").is_err());
    }
}
