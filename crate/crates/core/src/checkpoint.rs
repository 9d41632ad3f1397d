//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "GRLA" | u32 version | u8 dtype
//! u32 len | TOML config (model + train)
//! u32 len | manifest JSON lines (may be empty)
//! u32 tensor count
//! per tensor: u32 name len | name | u8 dtype | u8 ndim | u64 dims… | data | u32 CRC32 of the record
//! u32 CRC32 of everything before it
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use grla_tensor::{DType, Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::model::{DannConfig, DannModel};
use crate::trainer::{RunManifest, TrainConfig};

pub const MAGIC: &[u8; 4] = b"GRLA";
pub const FORMAT_VERSION: u32 = 1;
const AUX_PREFIX: &str = "aux/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigBlob {
    model: DannConfig,
    train: Option<TrainConfig>,
}

/// A model with its run manifest and any extra named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Float> {
    pub model: DannModel<T>,
    pub manifest: Option<RunManifest>,
    /// Extra tensors stored next to the parameters, e.g. an attribution baseline.
    pub aux: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Checkpoint<T> {
    pub fn new(model: DannModel<T>, manifest: Option<RunManifest>) -> Self {
        Checkpoint {
            model,
            manifest,
            aux: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let blob = ConfigBlob {
            model: self.model.config().clone(),
            train: self.manifest.as_ref().map(|m| m.header.train.clone()),
        };
        let config = toml::to_string(&blob).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let manifest = self.manifest.as_ref().map(RunManifest::to_jsonl).unwrap_or_default();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(T::DTYPE.code());
        for text in [config.as_bytes(), manifest.as_bytes()] {
            out.extend_from_slice(&len_u32(text.len())?.to_le_bytes());
            out.extend_from_slice(text);
        }
        let params = self.model.params().iter().map(|p| (p.name.clone(), &p.value));
        let aux = self.aux.iter().map(|(k, v)| (format!("{AUX_PREFIX}{k}"), v));
        let records: Vec<(String, &Tensor<T>)> = params.chain(aux).collect();
        out.extend_from_slice(&len_u32(records.len())?.to_le_bytes());
        for (name, t) in records {
            let start = out.len();
            out.extend_from_slice(&len_u32(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            out.push(u8::try_from(t.shape().len()).map_err(|_| Error::Checkpoint(format!("{name}: too many dimensions")))?);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            T::write_le(t.data(), &mut out);
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Parses a checkpoint; nothing is returned unless every checksum holds.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 17 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("not a GRLA checkpoint".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(Error::Checksum);
        }
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version(version));
        }
        let dtype = DType::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("unknown dtype".into()))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "stored as {}, requested {}",
                dtype.name(),
                T::DTYPE.name()
            )));
        }
        let config = r.text()?;
        let blob: ConfigBlob = toml::from_str(&config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let manifest_text = r.text()?;
        let manifest = if manifest_text.is_empty() {
            None
        } else {
            Some(RunManifest::from_jsonl(&manifest_text)?)
        };

        let count = r.u32()? as usize;
        let mut params = Vec::new();
        let mut aux = BTreeMap::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            if r.u8()? != T::DTYPE.code() {
                return Err(Error::Checkpoint(format!("{name}: dtype differs from header")));
            }
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(T::DTYPE.size()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: shape {shape:?} overflows")))?;
            let data = T::read_le(r.take(n)?);
            let end = r.pos;
            if crc32fast::hash(&body[start..end]) != r.u32()? {
                return Err(Error::Checksum);
            }
            let t = Tensor::new(shape, data)?;
            match name.strip_prefix(AUX_PREFIX) {
                Some(key) => {
                    aux.insert(key.to_string(), t);
                }
                None => params.push((name, t)),
            }
        }
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor records".into()));
        }
        let model = DannModel::from_named(blob.model, params)?;
        Ok(Checkpoint { model, manifest, aux })
    }
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("section of {n} bytes is too large")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("text section is not UTF-8".into()))
    }
}

/// Writes via a temporary sibling and a rename, so readers never see a partial file.
pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}
