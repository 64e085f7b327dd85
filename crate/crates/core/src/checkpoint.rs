//! Binary model checkpoints.
//!
//! Layout (little endian):
//! `b"TIMBACKP"`, `u32` version, 32-byte SHA-256 config hash, `u32` config
//! JSON length + bytes, `u32` tensor count, then per tensor: `u32` name
//! length + UTF-8 name, `u32` rank, `u64` per extent, `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Timba};
use crate::nn::ParamStore;
use crate::tensor::NdArray;

const MAGIC: &[u8; 8] = b"TIMBACKP";
pub const FORMAT_VERSION: u32 = 1;

fn hash_bytes(hex: &str) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, b) in out.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).expect("hex digest");
    }
    out
}

pub fn write_checkpoint(mut w: impl Write, model: &Timba) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&hash_bytes(&model.config.hash()))?;
    let cfg = serde_json::to_vec(&model.config)?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(&cfg)?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, value) in model.params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.ndim() as u32).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Timba> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash)?;
    let len = read_u32(&mut r)? as usize;
    let mut cfg = vec![0u8; len];
    r.read_exact(&mut cfg)?;
    let config: ModelConfig = serde_json::from_slice(&cfg)?;
    if hash_bytes(&config.hash()) != hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(name, NdArray::new(shape, data)?);
    }
    Timba::from_params(config, params)
}

pub fn save(path: &Path, model: &Timba) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Timba> {
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
