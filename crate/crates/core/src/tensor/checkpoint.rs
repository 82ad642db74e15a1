//! Named-tensor checkpoint file.
//!
//! Layout (little-endian): `"CKPT"`, `u32` version, `u32` entry count, then
//! per entry `u32` name length, UTF-8 name, `u32` rank, `u32` dims, `f32`
//! values; finally a `u32` CRC32 over everything after the magic.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::Tensor;

const MAGIC: &[u8; 4] = b"CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint or unsupported version")]
    FormatVersionMismatch { path: String },
    #[error("{path}: checksum mismatch or truncated checkpoint")]
    ChecksumMismatch { path: String },
    #[error("{path}: corrupt entry: {detail}")]
    Corrupt { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            tensor,
        }
    }
}

pub fn save_tensors(
    path: impl AsRef<Path>,
    entries: &[NamedTensor],
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        let shape = e.tensor.shape();
        buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in e.tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());

    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Option<&[u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn load_tensors(path: impl AsRef<Path>) -> Result<Vec<NamedTensor>, CheckpointError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: shown.clone(),
        source,
    })?;
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::FormatVersionMismatch { path: shown });
    }
    if u32::from_le_bytes(bytes[4..8].try_into().unwrap()) != CHECKPOINT_VERSION {
        return Err(CheckpointError::FormatVersionMismatch { path: shown });
    }
    if bytes.len() < 16 {
        return Err(CheckpointError::ChecksumMismatch { path: shown });
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().unwrap());
    if crc32fast::hash(&bytes[4..body_end]) != stored {
        return Err(CheckpointError::ChecksumMismatch { path: shown });
    }

    let corrupt = |detail: &str| CheckpointError::Corrupt {
        path: shown.clone(),
        detail: detail.to_string(),
    };
    let mut cur = Cursor {
        bytes: &bytes[..body_end],
        pos: 8,
    };
    let count = cur.u32().ok_or_else(|| corrupt("entry count"))?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32().ok_or_else(|| corrupt("name length"))? as usize;
        let name = cur
            .take(name_len)
            .and_then(|b| std::str::from_utf8(b).ok())
            .ok_or_else(|| corrupt("name"))?
            .to_string();
        let rank = cur.u32().ok_or_else(|| corrupt("rank"))? as usize;
        let shape = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| corrupt("shape"))?;
        let n: usize = shape.iter().product();
        let raw = cur
            .take(n.checked_mul(4).ok_or_else(|| corrupt("size"))?)
            .ok_or_else(|| corrupt("values"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))?;
        out.push(NamedTensor { name, tensor });
    }
    if cur.pos != body_end {
        return Err(corrupt("trailing bytes"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let entries = vec![
            NamedTensor::new(
                "conv0.weight",
                Tensor::new(vec![2, 1, 2, 2], (0..8).map(|i| i as f64 * 0.25).collect()).unwrap(),
            ),
            NamedTensor::new("alpha", Tensor::from_vec(vec![1.0, -1.0])),
        ];
        save_tensors(&p, &entries).unwrap();
        assert_eq!(load_tensors(&p).unwrap(), entries);

        let mut bytes = fs::read(&p).unwrap();
        let len = bytes.len();
        bytes[len - 9] ^= 1;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(
            load_tensors(&p),
            Err(CheckpointError::ChecksumMismatch { .. })
        ));

        fs::write(&p, b"CQT1whatever").unwrap();
        assert!(matches!(
            load_tensors(&p),
            Err(CheckpointError::FormatVersionMismatch { .. })
        ));
    }
}
