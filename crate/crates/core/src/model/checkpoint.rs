//! Checkpoint layout: `b"STRM"`, version `u32`, config TOML length `u32` and
//! bytes, block count `u32`, then per block the name, rank, dims and `f64` data.

use std::fs;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"STRM";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = toml::to_string(&params.config).map_err(|e| Error::Invalid(e.to_string()))?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    put_u32(&mut out, params.len());
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write-then-rename so a crash never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. With `expect`, the stored config must match it.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<ModelParams> {
    let bytes = fs::read(path).map_err(|_| Error::Missing(path.to_path_buf()))?;
    let bad = |r: &str| Error::format(path, r);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated checkpoint"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_of = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes")) as usize;
    let version = u32_of(take(4)?);
    if version != VERSION as usize {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let n = u32_of(take(4)?);
    let cfg_text = std::str::from_utf8(take(n)?).map_err(|_| bad("config is not utf-8"))?;
    let config: ModelConfig = toml::from_str(cfg_text).map_err(|e| bad(&e.to_string()))?;
    if let Some(want) = expect {
        if want != &config {
            return Err(Error::Incompatible(format!(
                "{} was written for a different model config",
                path.display()
            )));
        }
    }
    let blocks = u32_of(take(4)?);
    let mut named = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let len = u32_of(take(4)?);
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| bad("name is not utf-8"))?;
        let rank = u32_of(take(4)?);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_of(take(4)?));
        }
        let count: usize = shape.iter().product();
        let data = take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    ModelParams::from_named(&config, named)
}
