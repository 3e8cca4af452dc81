//! Named-tensor container.
//!
//! Layout (little-endian): magic `DWCK`, `u32` version, `u64` manifest
//! length, manifest JSON, `u32` tensor count, then per tensor: `u32` name
//! length, UTF-8 name, `u32` rows, `u32` cols, `u8` row-sparse flag,
//! `rows × cols` `f32` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DWCK";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet, manifest: &serde_json::Value) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let mut put = |b: &[u8]| w.write_all(b).map_err(|e| Error::io(path, e));
    let m = serde_json::to_vec(manifest).map_err(|e| Error::Format(e.to_string()))?;
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(m.len() as u64).to_le_bytes())?;
    put(&m)?;
    put(&(params.len() as u32).to_le_bytes())?;
    for (_, t) in params.iter() {
        put(&(t.name.len() as u32).to_le_bytes())?;
        put(t.name.as_bytes())?;
        put(&(t.rows as u32).to_le_bytes())?;
        put(&(t.cols as u32).to_le_bytes())?;
        put(&[u8::from(t.row_sparse)])?;
        for v in &t.data {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut get = |n: usize| -> Result<Vec<u8>> {
        let mut b = vec![0u8; n];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(b)
    };
    let u32_of = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
    if get(4)? != MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint", path.display())));
    }
    let version = u32_of(get(4)?);
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mlen = u64::from_le_bytes(get(8)?.try_into().expect("8 bytes")) as usize;
    let manifest: serde_json::Value =
        serde_json::from_slice(&get(mlen)?).map_err(|e| Error::Format(e.to_string()))?;
    let count = u32_of(get(4)?);
    let mut params = ParamSet::new();
    for _ in 0..count {
        let nlen = u32_of(get(4)?);
        let name = String::from_utf8(get(nlen)?).map_err(|e| Error::Format(e.to_string()))?;
        let rows = u32_of(get(4)?);
        let cols = u32_of(get(4)?);
        let row_sparse = get(1)?[0] != 0;
        let data = get(rows * cols * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.insert(Tensor {
            name,
            rows,
            cols,
            data,
            row_sparse,
        })?;
    }
    Ok((params, manifest))
}
