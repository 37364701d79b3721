//! Flat binary checkpoint: named f64 arrays, little-endian.
//!
//! Layout: 8-byte magic, u32 version, u32 entry count, then per entry
//! `u32 name_len, name bytes, u32 ndim, u64 dims..., f64 data...` (row-major).
//! Optimizer accumulators live under the reserved `__opt__/` prefix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use super::{AdError, AdResult, Arr};

const MAGIC: &[u8; 8] = b"MARLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Name prefix reserved for optimizer accumulators.
pub const OPT_PREFIX: &str = "__opt__/";

/// In-memory checkpoint contents: `(name, array)` pairs in file order.
#[derive(Default)]
pub struct Checkpoint {
    pub entries: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, arr: Arr) {
        self.entries.push((name.into(), arr));
    }

    pub fn get(&self, name: &str) -> Option<&Arr> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Entries under a prefix, with the prefix stripped.
    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Arr)> {
        self.entries
            .iter()
            .filter_map(move |(n, a)| n.strip_prefix(prefix).map(|rest| (rest, a)))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> AdResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(ckpt.entries.len() as u32).to_le_bytes())?;
    for (name, arr) in &ckpt.entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in arr.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> AdResult<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(AdError::Checkpoint(format!(
            "bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(AdError::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut ckpt = Checkpoint::default();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| AdError::Checkpoint(format!("bad name encoding: {e}")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(read_u64(&mut r)? as usize);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| AdError::Checkpoint(format!("bad shape for '{name}': {e}")))?;
        ckpt.push(name, arr);
    }
    Ok(ckpt)
}

fn read_u32(r: &mut impl Read) -> AdResult<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> AdResult<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}
