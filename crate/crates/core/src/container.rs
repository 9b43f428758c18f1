//! A small portable container for named `f64` tensors.
//!
//! Layout: magic `LVT1`, entry count, then per entry a name, shape, and the
//! element count, followed by all data blobs (little-endian `f64`) in entry
//! order. Writes are deterministic for equal inputs, so a SHA-256 over the
//! file doubles as a weight digest.

use crate::tensor::ParamBlock;
use std::io::{self, Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 4] = b"LVT1";

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("corrupt container: {0}")]
    Corrupt(String),
}

pub fn save_tensors(path: &Path, blocks: &[ParamBlock]) -> Result<(), ContainerError> {
    let bytes = to_bytes(blocks);
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn to_bytes(blocks: &[ParamBlock]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        let name = b.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for b in blocks {
        for &v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load_tensors(path: &Path) -> Result<Vec<ParamBlock>, ContainerError> {
    let file = std::fs::File::open(path)?;
    let mut r = io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 1 << 20 {
            return Err(ContainerError::Corrupt("name too long".into()));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ContainerError::Corrupt("name not utf-8".into()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        blocks.push(ParamBlock::zeros(name, shape));
    }
    for b in &mut blocks {
        let mut buf = vec![0u8; b.len() * 8];
        r.read_exact(&mut buf)?;
        for (i, chunk) in buf.chunks_exact(8).enumerate() {
            b.data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ContainerError::Corrupt("trailing bytes".into()));
    }
    Ok(blocks)
}

/// Hex SHA-256 of the container serialization of `blocks`; the canonical
/// weight digest used by the freeze-invariant checks and provenance records.
pub fn digest(blocks: &[ParamBlock]) -> String {
    crate::hash::sha256_hex(&to_bytes(blocks))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

// Suppress unused warning for Write import on some platforms.
#[allow(unused)]
fn _assert_write_usable(w: &mut dyn Write) {}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_blocks() -> Vec<ParamBlock> {
        let mut a = ParamBlock::zeros("layer0.weight", vec![2, 3]);
        a.data = vec![1.0, -2.5, 3.25, 0.0, f64::MIN_POSITIVE, 1e300];
        let mut b = ParamBlock::zeros("bias", vec![4]);
        b.data = vec![0.5, -0.5, 0.25, -0.25];
        vec![a, b]
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let blocks = sample_blocks();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tensors.bin");
        save_tensors(&path, &blocks).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(blocks, loaded);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let blocks = sample_blocks();
        let d1 = digest(&blocks);
        let d2 = digest(&blocks);
        assert_eq!(d1, d2);
        let mut changed = blocks.clone();
        changed[0].data[0] += 1e-15;
        assert_ne!(d1, digest(&changed));
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"nope").unwrap();
        assert!(matches!(load_tensors(&path), Err(ContainerError::BadMagic)));
    }
}
