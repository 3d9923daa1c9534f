//! HPK1 checkpoints: a JSON metadata block followed by named f64 tensors.
//!
//! ```text
//! b"HPK1"  u32 version (= 1)
//! u32 metadata length, UTF-8 JSON
//! u32 tensor count, then per tensor:
//!   u32 name length, UTF-8 name
//!   u32 rank, rank × u32 extents
//!   u8 dtype (1 = f64), 3 zero pad bytes
//!   numel × f64
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HPK1";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: Value,
    pub tensors: Vec<(String, Tensor)>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Shape(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = serde_json::to_vec(&ck.metadata)?;
    put_u32(&mut buf, meta.len())?;
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, ck.tensors.len())?;
    for (name, t) in &ck.tensors {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &dim in t.shape() {
            put_u32(&mut buf, dim)?;
        }
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&[0; 3]);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                message: format!("unexpected end of file at byte {}", self.at),
            });
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn format_err(&self, message: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message,
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.format_err("not an HPK1 checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(r.format_err(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = r.u32()?;
    let metadata: Value = serde_json::from_slice(r.take(meta_len)?)?;
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.format_err("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let dtype = r.take(4)?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::UnsupportedDtype(dtype));
        }
        let numel: usize = shape.iter().product();
        let data = r
            .take(8 * numel)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(r.format_err(format!("{} trailing bytes", bytes.len() - r.at)));
    }
    Ok(Checkpoint { metadata, tensors })
}

pub fn write(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl Model {
    /// Parameters plus `{"config": …}` merged into `extra` metadata.
    pub fn to_checkpoint(&self, extra: Value) -> Result<Checkpoint> {
        let mut metadata = match extra {
            Value::Object(map) => map,
            Value::Null => Default::default(),
            other => {
                return Err(Error::Config(format!(
                    "checkpoint metadata must be an object, got {other}"
                )))
            }
        };
        metadata.insert("config".into(), serde_json::to_value(&self.config)?);
        let tensors = self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        Ok(Checkpoint {
            metadata: Value::Object(metadata),
            tensors,
        })
    }

    /// Rebuild a model from the config and parameters in a checkpoint.
    /// Tensors the model does not know (e.g. optimizer state) are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let config: ModelConfig = serde_json::from_value(
            ck.metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Config("checkpoint has no config".into()))?,
        )
        .map_err(|e| Error::Config(format!("checkpoint config: {e}")))?;
        let mut model = Model::new(config)?;
        model.store.load_from(&ck.tensors)?;
        if !model.store.all_finite() {
            return Err(Error::Invariant("checkpoint holds non-finite parameters".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(&self.to_checkpoint(Value::Null)?, path)
    }

    pub fn load(path: &Path) -> Result<Model> {
        Model::from_checkpoint(&read(path)?)
    }
}
