//! Flat little-endian parameter checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    4 bytes  b"MDCK"
//! version  u32
//! count    u32
//! repeated count times:
//!   name_len u32, name (utf-8), rank u32, dims u64 × rank, payload f64 × prod(dims)
//! ```
//!
//! Tensors are written in name order. Every tensor is rank 2 in memory; a
//! rank-1 record loads as a `1×n` row.

use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MDCK";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&2u32.to_le_bytes())?;
        w.write_all(&(t.nrows() as u64).to_le_bytes())?;
        w.write_all(&(t.ncols() as u64).to_le_bytes())?;
        for v in t.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)?;
        let (rows, cols) = match rank {
            1 => (1, read_u64(&mut r)? as usize),
            2 => (read_u64(&mut r)? as usize, read_u64(&mut r)? as usize),
            _ => return Err(Error::Checkpoint(format!("{name}: unsupported rank {rank}"))),
        };
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let t = Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        store.insert(name, t);
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_checkpoint(std::io::BufReader::new(f))
}
