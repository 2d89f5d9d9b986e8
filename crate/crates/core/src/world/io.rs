//! On-disk dataset layout: `manifest.toml` plus one little-endian record per patch.
//!
//! Record layout: `b"STRW"`, version `u32`, source `u32` (0 = G, 1 = P),
//! then `c_in, k, h, w` as `u32`, followed by the covariate, target, mask and
//! true-propensity arrays as `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, NormStats, Patch, Source, WorldConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.toml";
const MAGIC: &[u8; 4] = b"STRW";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    variables: Vec<String>,
    splits: SplitFiles,
    norm: Option<NormStats>,
    config: WorldConfig,
}

#[derive(Serialize, Deserialize)]
struct SplitFiles {
    train: Vec<String>,
    val: Vec<String>,
    test: Vec<String>,
}

fn encode_patch(p: &Patch) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let src: u32 = match p.source {
        Source::Gedi => 0,
        Source::Plot => 1,
    };
    out.extend_from_slice(&src.to_le_bytes());
    let cs = p.covariates.shape();
    let ts = p.targets.shape();
    for d in [cs[0], ts[0], ts[1], ts[2]] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for t in [&p.covariates, &p.targets, &p.mask, &p.true_propensity] {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_patch(path: &Path, bytes: &[u8]) -> Result<Patch> {
    let bad = |r: &str| Error::format(path, r);
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| bad("truncated record"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let version = u32_at(take(4)?);
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let source = match u32_at(take(4)?) {
        0 => Source::Gedi,
        1 => Source::Plot,
        other => return Err(bad(&format!("unknown source tag {other}"))),
    };
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u32_at(take(4)?) as usize;
    }
    let [c_in, k, h, w] = dims;
    let mut read = |n: usize| -> Result<Vec<f64>> {
        let raw = take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let covariates = Tensor::new([c_in, h, w], read(c_in * h * w)?)?;
    let targets = Tensor::new([k, h, w], read(k * h * w)?)?;
    let mask = Tensor::new([k, h, w], read(k * h * w)?)?;
    let true_propensity = Tensor::new([k, h, w], read(k * h * w)?)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes after record"));
    }
    Ok(Patch {
        covariates,
        targets,
        mask,
        source,
        true_propensity,
    })
}

fn split_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}_{i:05}.strw")).collect()
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let splits = SplitFiles {
        train: split_names("train", ds.train.len()),
        val: split_names("val", ds.val.len()),
        test: split_names("test", ds.test.len()),
    };
    for (names, patches) in [
        (&splits.train, &ds.train),
        (&splits.val, &ds.val),
        (&splits.test, &ds.test),
    ] {
        for (name, p) in names.iter().zip(patches) {
            fs::write(dir.join(name), encode_patch(p))?;
        }
    }
    let manifest = Manifest {
        format: "strumpl-dataset".into(),
        version: VERSION,
        variables: ds.config.variables().iter().map(|s| s.to_string()).collect(),
        splits,
        norm: NormStats::compute(&ds.train).ok(),
        config: ds.config.clone(),
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Invalid(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    if !mpath.exists() {
        return Err(Error::Missing(mpath));
    }
    let text = fs::read_to_string(&mpath)?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if manifest.version != VERSION {
        return Err(Error::format(&mpath, format!("unsupported version {}", manifest.version)));
    }
    let read = |names: &[String]| -> Result<Vec<Patch>> {
        names
            .iter()
            .map(|n| {
                let p = dir.join(n);
                let bytes = fs::read(&p).map_err(|_| Error::Missing(p.clone()))?;
                decode_patch(&p, &bytes)
            })
            .collect()
    };
    let ds = Dataset {
        train: read(&manifest.splits.train)?,
        val: read(&manifest.splits.val)?,
        test: read(&manifest.splits.test)?,
        config: manifest.config,
    };
    for p in ds.all_patches() {
        if p.k() != ds.config.k {
            return Err(Error::format(dir, "patch K disagrees with manifest"));
        }
    }
    Ok(ds)
}

/// SHA-256 over the manifest and every record, in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|_| Error::Missing(mpath.clone()))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    for name in manifest
        .splits
        .train
        .iter()
        .chain(&manifest.splits.val)
        .chain(&manifest.splits.test)
    {
        h.update(fs::read(dir.join(name))?);
    }
    Ok(hex::encode(h.finalize()))
}
