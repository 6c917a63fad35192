//! Binary checkpoint format.
//!
//! Layout: magic `GAMCKPT1`, u32 block count, then per block:
//! u32 name length, UTF-8 name, u32 ndim, u32 dims, little-endian f64
//! values. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::param_store::ParamStore;
use crate::error::{GamError, Result};

const MAGIC: &[u8; 8] = b"GAMCKPT1";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBlock {
    pub name: String,
    pub shape: Vec<u32>,
    pub values: Vec<f64>,
}

pub fn save_blocks(path: &Path, blocks: &[CheckpointBlock]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(blocks.len() as u32).to_le_bytes())?;
    for b in blocks {
        let name = b.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(b.shape.len() as u32).to_le_bytes())?;
        for &d in &b.shape {
            w.write_all(&d.to_le_bytes())?;
        }
        let expect: usize = b.shape.iter().map(|&d| d as usize).product();
        debug_assert_eq!(expect, b.values.len());
        for &v in &b.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_blocks(path: &Path) -> Result<Vec<CheckpointBlock>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(GamError::Serde(format!(
            "bad checkpoint magic in {}",
            path.display()
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| GamError::Serde(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r)?);
        }
        let n: usize = shape.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        blocks.push(CheckpointBlock { name, shape, values });
    }
    Ok(blocks)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Save several stores under name prefixes (`prefix/block_name`).
pub fn save_stores(path: &Path, stores: &[(&str, &ParamStore)]) -> Result<()> {
    let mut blocks = Vec::new();
    for (prefix, store) in stores {
        for b in store.blocks() {
            blocks.push(CheckpointBlock {
                name: format!("{prefix}/{}", b.name),
                shape: vec![b.rows as u32, b.cols as u32],
                values: b.values.clone(),
            });
        }
    }
    save_blocks(path, &blocks)
}

/// Load block values back into stores saved with [`save_stores`].
/// Every block in every store must be present with matching shape.
pub fn load_stores(path: &Path, stores: &mut [(&str, &mut ParamStore)]) -> Result<()> {
    let blocks = load_blocks(path)?;
    for (prefix, store) in stores.iter_mut() {
        for b in store.blocks_mut() {
            let full = format!("{prefix}/{}", b.name);
            let found = blocks.iter().find(|cb| cb.name == full).ok_or_else(|| {
                GamError::Precondition(format!("checkpoint missing block '{full}'"))
            })?;
            if found.shape != vec![b.rows as u32, b.cols as u32] {
                return Err(GamError::Precondition(format!(
                    "checkpoint block '{full}' shape mismatch"
                )));
            }
            b.values.copy_from_slice(&found.values);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let blocks = vec![
            CheckpointBlock {
                name: "x.w0".into(),
                shape: vec![2, 3],
                values: vec![1.5, -0.25, f64::MIN_POSITIVE, 1e300, -0.0, 0.62137],
            },
            CheckpointBlock {
                name: "y".into(),
                shape: vec![1],
                values: vec![0.1 + 0.2],
            },
        ];
        save_blocks(&path, &blocks).unwrap();
        let back = load_blocks(&path).unwrap();
        assert_eq!(blocks.len(), back.len());
        for (a, b) in blocks.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(b.values.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn store_roundtrip() {
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let mut a = ParamStore::new();
        a.add_uniform("w", 3, 2, 2, 3, &mut rng);
        let mut b = ParamStore::new();
        b.add_uniform("w", 2, 2, 2, 2, &mut rng);
        save_stores(&path, &[("a", &a), ("b", &b)]).unwrap();
        let mut a2 = a.clone();
        let mut b2 = b.clone();
        a2.blocks_mut()[0].values.iter_mut().for_each(|v| *v = 0.0);
        b2.blocks_mut()[0].values.iter_mut().for_each(|v| *v = 0.0);
        load_stores(&path, &mut [("a", &mut a2), ("b", &mut b2)]).unwrap();
        assert_eq!(a.block("w").values, a2.block("w").values);
        assert_eq!(b.block("w").values, b2.block("w").values);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC\x00\x00\x00\x00").unwrap();
        assert!(load_blocks(&path).is_err());
    }
}
