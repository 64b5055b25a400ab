//! Tensor archive: a directory holding `tensors.bin` (named, shaped,
//! little-endian buffers) and `manifest.json` describing them.
//!
//! Binary layout of `tensors.bin`:
//!
//! ```text
//! b"HIOT" | u32 version | u32 entry_count
//! per entry: u32 name_len | name (utf-8) | u8 dtype (0=f32, 1=f64)
//!            | u32 rank | rank x u64 dims | data (product(dims) x width bytes)
//! ```
//! All integers little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DType, NnError, ParameterStore, Scalar, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
const MAGIC: &[u8; 4] = b"HIOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: DType,
    pub entries: Vec<EntryMeta>,
    /// Caller-defined payload (configuration, label space, sentence id, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

pub fn write_archive<T: Scalar>(
    dir: &Path,
    entries: &[(&str, &Tensor<T>)],
    metadata: serde_json::Value,
) -> Result<Manifest, NnError> {
    fs::create_dir_all(dir)?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(dtype_code(T::DTYPE));
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    fs::write(dir.join(TENSORS_FILE), buf)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        entries: entries
            .iter()
            .map(|(n, t)| EntryMeta {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        metadata,
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| NnError::Archive(format!("manifest encode: {e}")))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(manifest)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Archive("truncated tensor file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, NnError> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    serde_json::from_str(&text).map_err(|e| NnError::Archive(format!("manifest decode: {e}")))
}

pub type Entries<T> = Vec<(String, Tensor<T>)>;

/// Reads every tensor, converting to `T` when the stored precision differs.
pub fn read_archive<T: Scalar>(dir: &Path) -> Result<(Entries<T>, Manifest), NnError> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(NnError::Archive(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let bytes = fs::read(dir.join(TENSORS_FILE))?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(NnError::Archive("bad magic".into()));
    }
    let version = r.u32()?;
    if version != manifest.format_version {
        return Err(NnError::Archive(format!(
            "tensor file version {version} disagrees with manifest {}",
            manifest.format_version
        )));
    }
    let count = r.u32()? as usize;
    if count != manifest.entries.len() {
        return Err(NnError::Archive(format!(
            "manifest lists {} entries, tensor file holds {count}",
            manifest.entries.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for meta in &manifest.entries {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| NnError::Archive("entry name is not utf-8".into()))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = match code {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(NnError::Archive(format!("unknown dtype code {other}"))),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if name != meta.name || shape != meta.shape {
            return Err(NnError::Archive(format!(
                "entry `{name}` {shape:?} does not match manifest `{}` {:?}",
                meta.name, meta.shape
            )));
        }
        let len: usize = shape.iter().product();
        let width = dtype.byte_width();
        let raw = r.take(len * width)?;
        let data: Vec<T> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(NnError::Archive("trailing bytes in tensor file".into()));
    }
    Ok((out, manifest))
}

/// Writes every parameter of `store` in registration order.
pub fn save_store<T: Scalar>(
    dir: &Path,
    store: &ParameterStore<T>,
    metadata: serde_json::Value,
) -> Result<Manifest, NnError> {
    let entries: Vec<(&str, &Tensor<T>)> = store.iter().map(|(n, v)| (n, &v.value)).collect();
    write_archive(dir, &entries, metadata)
}

/// Loads values into an existing store; names and shapes must match exactly.
pub fn load_into_store<T: Scalar>(dir: &Path, store: &mut ParameterStore<T>) -> Result<Manifest, NnError> {
    let (entries, manifest) = read_archive::<T>(dir)?;
    let expected = store.names();
    let found: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    if found != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(NnError::Archive(format!(
            "parameter names differ: archive has {} entries, model expects {}",
            found.len(),
            expected.len()
        )));
    }
    for (name, t) in entries {
        let slot = store
            .by_name_mut(&name)
            .ok_or_else(|| NnError::UnknownParameter(name.clone()))?;
        if slot.value.shape() != t.shape() {
            return Err(NnError::Archive(format!(
                "shape of `{name}`: archive {:?}, model {:?}",
                t.shape(),
                slot.value.shape()
            )));
        }
        slot.value = t;
    }
    Ok(manifest)
}
