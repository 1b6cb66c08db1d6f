//! Flat binary tensor archive.
//!
//! Layout:
//!
//! ```text
//! b"FSSARCH1"
//! u64 LE          manifest length in bytes
//! manifest        UTF-8 lines, tab separated:
//!                   meta    <key>   <value>
//!                   tensor  <name>  <dtype>  <d0,d1,...>  <offset>  <nbytes>
//! data            tensor payloads, little-endian, row-major
//! ```
//!
//! Offsets are relative to the start of the data section.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{FssError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FSSARCH1";

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    dtype: String,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

/// In-memory archive: string metadata plus named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    names: Vec<String>,
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        let entry = Entry { dtype: T::DTYPE.to_string(), shape: tensor.shape().to_vec(), bytes: T::to_le_bytes_vec(tensor.data()) };
        if self.entries.insert(name.to_string(), entry).is_none() {
            self.names.push(name.to_string());
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Reads a tensor, converting from the stored dtype when it differs from `T`.
    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entries.get(name).ok_or_else(|| FssError::Checkpoint(format!("missing tensor {name}")))?;
        let data: Vec<T> = match e.dtype.as_str() {
            d if d == T::DTYPE => T::from_le_bytes_slice(&e.bytes),
            "f32" => f32::from_le_bytes_slice(&e.bytes).into_iter().map(|v| T::of(v as f64)).collect(),
            "f64" => f64::from_le_bytes_slice(&e.bytes).into_iter().map(T::of).collect(),
            other => return Err(FssError::Checkpoint(format!("unsupported dtype {other} for {name}"))),
        };
        Tensor::new(&e.shape, data).map_err(|err| FssError::Checkpoint(format!("{name}: {err}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for (k, v) in &self.metadata {
            manifest.push_str(&format!("meta\t{k}\t{v}\n"));
        }
        let mut offset = 0usize;
        for name in &self.names {
            let e = &self.entries[name];
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("tensor\t{name}\t{}\t{}\t{offset}\t{}\n", e.dtype, dims.join(","), e.bytes.len()));
            offset += e.bytes.len();
        }
        let mut out = Vec::with_capacity(16 + manifest.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for name in &self.names {
            out.extend_from_slice(&self.entries[name].bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FssError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a tensor archive (bad magic)"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let manifest = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| bad("manifest is not UTF-8"))?;
        let data = &bytes[16 + mlen..];
        let mut archive = Archive::new();
        for line in manifest.lines() {
            let fields: Vec<&str> = line.split('\t').collect();
            match fields.as_slice() {
                ["meta", k, v] => {
                    archive.metadata.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dtype, dims, offset, nbytes] => {
                    let shape: Vec<usize> = if dims.is_empty() {
                        vec![]
                    } else {
                        dims.split(',').map(|d| d.parse().map_err(|_| bad("bad dimension"))).collect::<Result<_>>()?
                    };
                    let offset: usize = offset.parse().map_err(|_| bad("bad offset"))?;
                    let nbytes: usize = nbytes.parse().map_err(|_| bad("bad length"))?;
                    let payload = data.get(offset..offset + nbytes).ok_or_else(|| bad("truncated tensor data"))?;
                    archive.names.push(name.to_string());
                    archive.entries.insert(
                        name.to_string(),
                        Entry { dtype: dtype.to_string(), shape, bytes: payload.to_vec() },
                    );
                }
                _ => return Err(bad(&format!("malformed manifest line: {line}"))),
            }
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
