//! Model persistence.
//!
//! Binary body, little-endian throughout:
//!
//! ```text
//! "EANC" | version u32 | param count u32
//! per parameter:
//!   name len u32 | name utf-8 | rank u32 | dims u32[rank]
//!   data f64[n] | adam m f64[n] | adam v f64[n] | adam step u64
//! ```
//!
//! A JSON sidecar (`<path>.json`) carries [`ModelMeta`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::write_atomic;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::model::{Architecture, EmoAudioNet, TaskKind};
use crate::nn::{Parameter, Tensor};

pub const MAGIC: &[u8; 4] = b"EANC";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub task: TaskKind,
    pub width: usize,
    pub architecture: Architecture,
    pub features: FeatureConfig,
    pub seed: u64,
}

impl ModelMeta {
    pub fn for_model(net: &EmoAudioNet, features: FeatureConfig, seed: u64) -> Self {
        Self {
            task: net.task(),
            width: net.architecture().width,
            architecture: net.architecture().clone(),
            features,
            seed,
        }
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_parameters(params: &[&Parameter]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, params.len());
    for p in params {
        put_u32(&mut out, p.name.len());
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.shape().len());
        for &d in p.shape() {
            put_u32(&mut out, d);
        }
        put_f64s(&mut out, p.data());
        put_f64s(&mut out, &p.adam_m);
        put_f64s(&mut out, &p.adam_v);
        out.extend_from_slice(&p.step_count.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("truncated checkpoint while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Integrity(format!("absurd length for {what}")))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode_parameters(bytes: &[u8]) -> Result<Vec<Parameter>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing EANC magic bytes".into()));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let count = r.u32("parameter count")?;
    let mut params = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Integrity("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Integrity(format!("dims of {name} overflow")))?;
        let data = r.f64s(n, &name)?;
        let adam_m = r.f64s(n, &name)?;
        let adam_v = r.f64s(n, &name)?;
        let step_count = r.u64(&name)?;
        params.push(Parameter {
            name,
            tensor: Tensor::new(&dims, data)?,
            adam_m,
            adam_v,
            step_count,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(net: &EmoAudioNet, meta: &ModelMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if meta.task != net.task() || &meta.architecture != net.architecture() {
        return Err(Error::Config("checkpoint metadata does not describe this model".into()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_atomic(path, &encode_parameters(&net.parameters()))?;
    let json = serde_json::to_string_pretty(meta).expect("plain struct serializes");
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<ModelMeta> {
    let side = sidecar_path(path.as_ref());
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("bad sidecar {}: {e}", side.display())))
}

/// Loads a checkpoint using the architecture recorded in its sidecar.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EmoAudioNet, ModelMeta)> {
    let path = path.as_ref();
    let meta = load_meta(path)?;
    let net = load_into(path, meta.task, meta.architecture.clone(), meta.seed)?;
    Ok((net, meta))
}

/// Loads a checkpoint into a freshly built network of the requested task and
/// architecture. A task whose class count differs from the sidecar's is a
/// configuration error; any other mismatch surfaces as a shape error naming
/// the first offending parameter.
pub fn load_checkpoint_as(path: impl AsRef<Path>, task: TaskKind, arch: Architecture) -> Result<(EmoAudioNet, ModelMeta)> {
    let path = path.as_ref();
    let meta = load_meta(path)?;
    if meta.task.n_classes() != task.n_classes() {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} ({} classes), requested {} ({} classes)",
            meta.task,
            meta.task.n_classes(),
            task,
            task.n_classes()
        )));
    }
    let net = load_into(path, task, arch, meta.seed)?;
    Ok((net, meta))
}

fn load_into(path: &Path, task: TaskKind, arch: Architecture, seed: u64) -> Result<EmoAudioNet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let params = decode_parameters(&bytes)?;
    let mut net = EmoAudioNet::new(task, arch, seed)?;
    net.load_parameters(params)?;
    Ok(net)
}
