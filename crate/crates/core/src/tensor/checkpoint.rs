//! Binary parameter checkpoints.
//!
//! Layout: magic `"MANS"`, format version (u32 LE), then for each named
//! parameter: name length (u64 LE), UTF-8 name, rank (u64 LE), dims
//! (u64 LE each), float32 LE payload. No trailing index; readers consume
//! records until EOF.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MANS";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    UnsupportedVersion(u32),
    Truncated(&'static str),
    Corrupt(String),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Io(e) => write!(f, "checkpoint i/o error: {e}"),
            Self::BadMagic => write!(f, "not a MANS checkpoint (bad magic)"),
            Self::UnsupportedVersion(v) => {
                write!(f, "unsupported checkpoint version {v} (expected {CHECKPOINT_VERSION})")
            }
            Self::Truncated(what) => write!(f, "truncated checkpoint while reading {what}"),
            Self::Corrupt(msg) => write!(f, "corrupt checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Self::Truncated("record")
        } else {
            Self::Io(e)
        }
    }
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    entries: &[(String, Tensor<F>)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.rank() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.as_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads every record; payloads come back as `f32` (the stored precision).
pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Truncated("magic"))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)
        .map_err(|_| CheckpointError::Truncated("version"))?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let mut entries = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        if name_len > 1 << 20 {
            return Err(CheckpointError::Corrupt(format!(
                "unreasonable name length {name_len}"
            )));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Truncated("name"))?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("name is not UTF-8".into()))?;

        r.read_exact(&mut len8)
            .map_err(|_| CheckpointError::Truncated("rank"))?;
        let rank = u64::from_le_bytes(len8) as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("unreasonable rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len8)
                .map_err(|_| CheckpointError::Truncated("dims"))?;
            dims.push(u64::from_le_bytes(len8) as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf)
                .map_err(|_| CheckpointError::Truncated("payload"))?;
            data.push(f32::from_le_bytes(buf));
        }
        let tensor = Tensor::new(dims, data)
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}
