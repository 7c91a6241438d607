//! On-disk feature cache.
//!
//! Record layout (little-endian): `u32` id length, id bytes, `u32` dim, then
//! `dim` `f32` values. One clip's MFCC and spectrogram records live in
//! separate files named by `sha256(wav bytes)` and a hash of the feature
//! configuration, so an entry is reused only when both match.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::decode_wav;
use crate::error::{Error, Result};
use crate::features::{ClipFeatures, FeatureExtractor};
use crate::mfcc::MfccInput;
use crate::spectro::SpectroImage;

pub const CACHE_ENV: &str = "EMOAUDIONET_CACHE_DIR";

pub fn write_record<W: Write>(mut w: W, clip_id: &str, values: &[f64]) -> io::Result<()> {
    let id = clip_id.as_bytes();
    let mut buf = Vec::with_capacity(8 + id.len() + 4 * values.len());
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
}

/// Reads one record; `Ok(None)` at a clean end of stream.
pub fn read_record<R: Read>(mut r: R) -> Result<Option<(String, Vec<f64>)>> {
    let mut len = [0u8; 4];
    match r.read(&mut len[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(Error::io("<feature record>", e)),
    }
    let truncated = |e: io::Error| Error::Integrity(format!("truncated feature record: {e}"));
    r.read_exact(&mut len[1..]).map_err(truncated)?;
    let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut id).map_err(truncated)?;
    let id = String::from_utf8(id).map_err(|_| Error::Integrity("clip id is not UTF-8".into()))?;
    r.read_exact(&mut len).map_err(truncated)?;
    let mut raw = vec![0u8; 4 * u32::from_le_bytes(len) as usize];
    r.read_exact(&mut raw).map_err(truncated)?;
    let values = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Ok(Some((id, values)))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<f64>)>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = &bytes[..];
    let mut out = Vec::new();
    while let Some(rec) = read_record(&mut cursor)? {
        out.push(rec);
    }
    Ok(out)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$EMOAUDIONET_CACHE_DIR` if set, else `fallback`.
    pub fn from_env_or(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os(CACHE_ENV) {
            Some(dir) if !dir.is_empty() => Self::new(dir),
            _ => Self::new(fallback),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(wav_bytes: &[u8], config_fingerprint: &str) -> String {
        let clip = Sha256::digest(wav_bytes);
        let cfg = Sha256::digest(config_fingerprint.as_bytes());
        format!("{}-{}", hex(&clip), &hex(&cfg)[..16])
    }

    fn paths(&self, key: &str) -> (PathBuf, PathBuf) {
        (self.dir.join(format!("{key}.mfcc")), self.dir.join(format!("{key}.spectro")))
    }

    fn read_one(path: &Path, expected_dim: usize) -> Option<Vec<f64>> {
        let bytes = fs::read(path).ok()?;
        match read_record(&bytes[..]) {
            Ok(Some((_, v))) if v.len() == expected_dim => Some(v),
            _ => None,
        }
    }

    /// Cached features for a WAV file, computing and storing them on a miss.
    /// Returns the features and whether they came from the cache.
    pub fn load_or_compute(
        &self,
        wav_path: &Path,
        clip_id: &str,
        extractor: &FeatureExtractor,
    ) -> Result<(ClipFeatures, bool)> {
        let bytes = fs::read(wav_path).map_err(|e| Error::io(wav_path, e))?;
        let config = extractor.config();
        let key = Self::key(&bytes, &config.fingerprint());
        let (mfcc_path, spec_path) = self.paths(&key);
        if let (Some(m), Some(s)) = (
            Self::read_one(&mfcc_path, config.mfcc.output_dim),
            Self::read_one(&spec_path, config.spectro_dim()),
        ) {
            let features = ClipFeatures {
                mfcc: MfccInput {
                    values: m,
                    clip_id: clip_id.to_owned(),
                },
                spectro: SpectroImage {
                    pixels: s,
                    clip_id: clip_id.to_owned(),
                    clamped_values: 0,
                },
            };
            return Ok((features, true));
        }
        let clip = decode_wav(&bytes[..], clip_id)?;
        let features = extractor.extract(&clip)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let mut buf = Vec::new();
        write_record(&mut buf, clip_id, &features.mfcc.values).expect("vec write");
        write_atomic(&mfcc_path, &buf)?;
        buf.clear();
        write_record(&mut buf, clip_id, &features.spectro.pixels).expect("vec write");
        write_atomic(&spec_path, &buf)?;
        Ok((features, false))
    }
}

/// Writes through a temporary sibling and renames, so readers never see half a file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
