//! HFV1 feature-volume files.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0..4    b"HFV1"
//! 4..8    u32 version (= 1)
//! 8..12   u32 T
//! 12..16  u32 K
//! 16..20  u32 C
//! 20      u8 dtype (0 = f32)
//! 21..24  zero padding
//! 24..    T*K*C f32, index order t (outer), k, c (inner)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"HFV1";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const HEADER_LEN: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub frames: u32,
    pub tokens: u32,
    pub channels: u32,
    pub dtype: u8,
}

impl Header {
    pub fn element_count(&self) -> usize {
        self.frames as usize * self.tokens as usize * self.channels as usize
    }
}

/// Encode a `[T, K, C]` tensor. Values are narrowed to `f32`.
pub fn encode(data: &Tensor) -> Result<Vec<u8>> {
    let &[t, k, c] = data.shape() else {
        return Err(Error::Shape(format!(
            "feature volume must be [T, K, C], got {:?}",
            data.shape()
        )));
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * data.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    for dim in [t, k, c] {
        let dim = u32::try_from(dim).map_err(|_| Error::Shape(format!("extent {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&[0u8; 3]);
    for &v in data.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(buf)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let format_err = |message: String| Error::Format {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(format_err(format!(
            "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format_err(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let header = Header {
        frames: u32_at(bytes, 8),
        tokens: u32_at(bytes, 12),
        channels: u32_at(bytes, 16),
        dtype: bytes[20],
    };
    if header.dtype != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(header.dtype));
    }
    if header.element_count() == 0 {
        return Err(format_err("zero extent in header".into()));
    }
    Ok(header)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let header = decode_header(bytes, path)?;
    let payload = &bytes[HEADER_LEN..];
    let expected = header.element_count();
    if payload.len() != 4 * expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Tensor::new(
        vec![header.frames as usize, header.tokens as usize, header.channels as usize],
        data,
    )
}

pub fn write_tensor(data: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode(data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_header(&bytes, path)
}
