use std::io::{Read, Write};
use std::path::Path;

use crate::numkit::{ParamStore, Tensor2D};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ORSDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Layout: magic, u32 version, u32 array count, then per array u32 name
/// length, UTF-8 name, u32 rows, u32 cols and `rows * cols` f64 values.
/// All integers and floats little-endian.
pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    let u32le = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))
    };
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&u32le(store.len())?)?;
    for (name, t) in store.iter() {
        w.write_all(&u32le(name.len())?)?;
        w.write_all(name.as_bytes())?;
        w.write_all(&u32le(t.rows())?)?;
        w.write_all(&u32le(t.cols())?)?;
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Checkpoint(format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Named arrays in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor2D)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file shorter than the magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = read_u32(&mut r, "array count")? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 16));
    for k in 0..n {
        let len = read_u32(&mut r, "name length")? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint(format!("truncated name of array {k}")))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint(format!("array {k} name is not UTF-8")))?;
        let rows = read_u32(&mut r, "rows")? as usize;
        let cols = read_u32(&mut r, "cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)
            .map_err(|_| Error::Checkpoint(format!("truncated data of `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor2D::from_vec(rows, cols, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint(
            "trailing bytes after the last array".into(),
        ));
    }
    Ok(out)
}

/// Overwrites every parameter of `store` from `arrays`; names and shapes
/// must match exactly.
pub fn load_into(store: &mut ParamStore, arrays: Vec<(String, Tensor2D)>) -> Result<()> {
    if arrays.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{} arrays for a model with {} parameters",
            arrays.len(),
            store.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in arrays {
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("`{name}` appears twice")));
        }
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "`{name}` has shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        store.set(id, t)?;
    }
    Ok(())
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(store, std::io::BufWriter::new(f))
}

pub fn load_checkpoint(store: &mut ParamStore, path: &Path) -> Result<()> {
    let f = std::fs::File::open(path)?;
    let arrays = read_checkpoint(std::io::BufReader::new(f))?;
    load_into(store, arrays)
}
