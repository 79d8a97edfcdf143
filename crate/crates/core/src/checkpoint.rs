//! Binary parameter files and the step-directory checkpoint layout.
//!
//! A parameter file is the magic `BSRPARAM`, a little-endian `u32` format
//! version, a `u64` manifest length, the JSON [`Manifest`], then the raw
//! little-endian tensor data in manifest order.
//!
//! A checkpoint directory `step-NNNN/` holds `params.bin`, `config.json`,
//! `rng-state` (JSON) and `optim.bin`; kcbpn checkpoints also carry the
//! kernel PCA as `pca.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"BSRPARAM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the data section.
    pub offset: usize,
    /// Number of elements.
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Total number of stored scalars.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.len).sum()
    }
}

pub fn encode_params<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut manifest = Manifest::default();
    let mut data = Vec::with_capacity(store.numel() * T::BYTES);
    for (_, name, t) in store.iter() {
        manifest.entries.push(ManifestEntry {
            name: name.to_string(),
            dtype: T::DTYPE.to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
            len: t.numel(),
        });
        for &v in t.data() {
            v.write_le(&mut data);
        }
    }
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn split_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a parameter file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported parameter file version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let json = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
    Ok((serde_json::from_slice(json)?, &bytes[20 + len..]))
}

pub fn decode_manifest(bytes: &[u8]) -> Result<Manifest> {
    Ok(split_header(bytes)?.0)
}

/// Decodes every tensor, converting from the stored dtype to `T`.
pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    let (manifest, data) = split_header(bytes)?;
    let mut store = ParamStore::new();
    for e in &manifest.entries {
        if e.shape.iter().product::<usize>() != e.len {
            return Err(bad(format!("{}: shape {:?} does not hold {} values", e.name, e.shape, e.len)));
        }
        let values: Vec<T> = match e.dtype.as_str() {
            "f32" => read_all::<f32>(data, e)?.into_iter().map(|v| T::of(v as f64)).collect(),
            "f64" => read_all::<f64>(data, e)?.into_iter().map(T::of).collect(),
            other => return Err(bad(format!("{}: unknown dtype {other}", e.name))),
        };
        if store.id(&e.name).is_some() {
            return Err(bad(format!("duplicate entry {}", e.name)));
        }
        store.add(e.name.clone(), Tensor::from_vec(&e.shape, values));
    }
    Ok(store)
}

fn read_all<S: Scalar>(data: &[u8], e: &ManifestEntry) -> Result<Vec<S>> {
    let bytes = data
        .get(e.offset..e.offset + e.len * S::BYTES)
        .ok_or_else(|| bad(format!("{}: data out of range", e.name)))?;
    Ok(bytes.chunks_exact(S::BYTES).map(S::read_le).collect())
}

pub fn save_params<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(store)).map_err(|e| Error::io(path, e))
}

pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    let path = path.as_ref();
    decode_params(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    decode_manifest(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Copies `src` into `dst` by name; both must hold exactly the same names
/// and shapes.
pub fn assign_params<T: Scalar>(dst: &mut ParamStore<T>, src: &ParamStore<T>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(bad(format!("expected {} tensors, found {}", dst.len(), src.len())));
    }
    let ids: Vec<_> = dst.ids().collect();
    for id in ids {
        let name = dst.name(id).to_string();
        let sid = src.id(&name).ok_or_else(|| bad(format!("missing tensor {name}")))?;
        let t = src.get(sid);
        if t.shape() != dst.get(id).shape() {
            return Err(bad(format!("{name}: shape {:?}, expected {:?}", t.shape(), dst.get(id).shape())));
        }
        *dst.get_mut(id) = t.clone();
    }
    Ok(())
}

pub const PARAMS_FILE: &str = "params.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const RNG_FILE: &str = "rng-state";
pub const OPTIM_FILE: &str = "optim.bin";
pub const PCA_FILE: &str = "pca.bin";

pub fn step_dir(root: impl AsRef<Path>, step: usize) -> PathBuf {
    root.as_ref().join(format!("step-{step:04}"))
}

/// Step number of a `step-NNNN` directory name.
pub fn parse_step_dir(name: &str) -> Option<usize> {
    let digits = name.strip_prefix("step-")?;
    (!digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())).then(|| digits.parse().ok())?
}

/// The highest-numbered complete checkpoint below `root`, if any.
pub fn latest_step_dir(root: impl AsRef<Path>) -> Result<Option<(usize, PathBuf)>> {
    let root = root.as_ref();
    if !root.exists() {
        return Ok(None);
    }
    let mut best = None;
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let Some(step) = entry.file_name().to_str().and_then(parse_step_dir) else { continue };
        let dir = entry.path();
        if dir.join(PARAMS_FILE).is_file() && dir.join(CONFIG_FILE).is_file() && best.as_ref().is_none_or(|(s, _)| step > *s) {
            best = Some((step, dir));
        }
    }
    Ok(best)
}

/// Resolves a path that is either a step directory or a root holding them.
pub fn resolve_checkpoint(path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    if path.join(PARAMS_FILE).is_file() {
        return Ok(path.to_path_buf());
    }
    latest_step_dir(path)?
        .map(|(_, d)| d)
        .ok_or_else(|| bad(format!("no checkpoint found under {}", path.display())))
}

/// Synthesis state needed to continue a run: batches are a pure function of
/// `(seed, step)`, so the next step index is the whole generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct OptimHeader {
    t: u64,
}

/// Adam moments as two parameter files plus the update count.
pub fn save_optim<T: Scalar>(path: impl AsRef<Path>, t: u64, m: &ParamStore<T>, v: &ParamStore<T>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&OptimHeader { t })?;
    let (m, v) = (encode_params(m), encode_params(v));
    let mut out = Vec::new();
    for part in [&header, &m, &v] {
        out.extend_from_slice(&(part.len() as u64).to_le_bytes());
        out.extend_from_slice(part);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_optim<T: Scalar>(path: impl AsRef<Path>) -> Result<(u64, ParamStore<T>, ParamStore<T>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut parts = Vec::with_capacity(3);
    let mut rest = &bytes[..];
    for _ in 0..3 {
        let len = rest.get(..8).ok_or_else(|| bad("truncated optimizer state"))?;
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        parts.push(rest.get(8..8 + len).ok_or_else(|| bad("truncated optimizer state"))?);
        rest = &rest[8 + len..];
    }
    let header: OptimHeader = serde_json::from_slice(parts[0])?;
    Ok((header.t, decode_params(parts[1])?, decode_params(parts[2])?))
}
