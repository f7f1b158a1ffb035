//! Flat binary checkpoint for a [`ParamSet`].
//!
//! Layout: the magic bytes `SWCX1`, then for each parameter in path-sorted
//! order: path length (u64 LE), UTF-8 path bytes, rank (u64 LE), each dim
//! (u64 LE), then the raw values as f64 LE. Writing the same set twice
//! produces byte-identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

const MAGIC: &[u8; 5] = b"SWCX1";

pub fn save(params: &ParamSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, tensor) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u64).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loaded parameters come back as gradient-tracking leaves, ready to train.
pub fn load(path: impl AsRef<Path>) -> Result<ParamSet> {
    let mut r = BufReader::new(File::open(&path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint("file truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut params = ParamSet::new();
    loop {
        let mut len_buf = [0u8; 8];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len_buf) as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Checkpoint("parameter path is not UTF-8".into()))?;
        r.read_exact(&mut len_buf)?;
        let rank = u64::from_le_bytes(len_buf) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len_buf)?;
            shape.push(u64::from_le_bytes(len_buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut val_buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut val_buf).map_err(|_| {
                Error::Checkpoint(format!("file truncated inside values of {name:?}"))
            })?;
            data.push(f64::from_le_bytes(val_buf));
        }
        params.insert(name, Tensor::parameter(data, &shape)?)?;
    }
    Ok(params)
}
