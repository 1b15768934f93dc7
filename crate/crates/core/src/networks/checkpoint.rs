//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! describing every tensor, then raw little-endian `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParameterSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FSSNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    dtype: String,
    byte_order: String,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    /// `live` or `ema`.
    slot: String,
    shape: Vec<usize>,
    offset: u64,
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub step: u64,
    pub live: BTreeMap<String, Tensor>,
    pub ema: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Loads the tensors into `ps`, which must have the same names and shapes.
    pub fn restore_into(self, ps: &mut ParameterSet) -> Result<()> {
        ps.load(self.live, self.ema, self.step)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, config: &serde_json::Value, params: &ParameterSet) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::new();
    let mut data: Vec<u8> = Vec::new();
    for (slot, map) in [("live", params.live()), ("ema", params.shadow())] {
        for (name, t) in map {
            tensors.push(TensorEntry {
                name: name.clone(),
                slot: slot.to_string(),
                shape: t.shape().to_vec(),
                offset: data.len() as u64,
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        dtype: "float64".into(),
        byte_order: "little".into(),
        step: params.step,
        config: config.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header).expect("header serialises");
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write then rename so a crash never leaves a half-written checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut buf = Vec::with_capacity(20 + header.len() + data.len());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&data);
    f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Checkpoint { path: PathBuf::from(path), reason: reason.to_string() };
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&format!("bad header: {e}")))?;
    if header.dtype != "float64" || header.byte_order != "little" {
        return Err(bad("unsupported dtype or byte order"));
    }
    let data = &bytes[body..];
    let mut live = BTreeMap::new();
    let mut ema = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 8 * n;
        if end > data.len() {
            return Err(bad(&format!("tensor {} extends past end of file", e.name)));
        }
        let values = data[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&e.shape, values);
        match e.slot.as_str() {
            "live" => live.insert(e.name, t),
            "ema" => ema.insert(e.name, t),
            other => return Err(bad(&format!("unknown slot {other}"))),
        };
    }
    Ok(Checkpoint { config: header.config, step: header.step, live, ema })
}
