//! Audio ingestion and framing.
//!
//! Everything downstream works on [`AudioClip`]: mono `f64` samples in
//! `[-1, 1]` plus the sample rate they were recorded at.

use std::f64::consts::PI;
use std::io::{Read, Seek, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono PCM audio normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
    clip_id: String,
}

impl AudioClip {
    pub fn new(clip_id: impl Into<String>, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("audio clip has no samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::invalid(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
            clip_id: clip_id.into(),
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn clip_id(&self) -> &str {
        &self.clip_id
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Same audio under a different id.
    pub fn with_id(mut self, clip_id: impl Into<String>) -> Self {
        self.clip_id = clip_id.into();
        self
    }

    /// Builds a clip from samples that may stray outside `[-1, 1]`; they are clamped.
    pub(crate) fn from_clamped(clip_id: String, samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        Self::new(clip_id, samples, sample_rate)
    }
}

/// A fixed-length slice of a clip starting at `start_index`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub values: Vec<f64>,
    pub start_index: usize,
}

/// Reads a RIFF/WAVE file. The clip id is the file stem.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let clip_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode_wav(std::io::BufReader::new(file), clip_id)
}

/// Decodes 16-bit PCM or 32-bit IEEE float WAV data, mono or stereo.
pub fn decode_wav<R: Read>(reader: R, clip_id: impl Into<String>) -> Result<AudioClip> {
    let reader = hound::WavReader::new(reader).map_err(|e| map_hound_error(e, "header"))?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(Error::UnsupportedFormat(format!(
            "{} channels (only mono and stereo are accepted)",
            spec.channels
        )));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound_error(e, "data"))?,
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| map_hound_error(e, "data"))?,
        (format, bits) => {
            return Err(Error::UnsupportedFormat(format!(
                "{bits}-bit {format:?} samples (need 16-bit PCM or 32-bit float)"
            )))
        }
    };
    let channels = usize::from(spec.channels);
    if !interleaved.len().is_multiple_of(channels) {
        return Err(Error::Decode {
            chunk: "data".into(),
            message: "sample count is not a multiple of the channel count".into(),
        });
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.iter().any(|s| !s.is_finite()) {
        return Err(Error::Decode {
            chunk: "data".into(),
            message: "non-finite float sample".into(),
        });
    }
    AudioClip::from_clamped(clip_id.into(), mono, spec.sample_rate)
}

fn map_hound_error(err: hound::Error, stage: &str) -> Error {
    match err {
        hound::Error::Unsupported => {
            Error::UnsupportedFormat("encoding not supported by the WAV reader".into())
        }
        hound::Error::FormatError(msg) => {
            let chunk = if msg.contains("RIFF") {
                "RIFF"
            } else if msg.contains("WAVE") {
                "WAVE"
            } else if msg.contains("fmt") || msg.contains("format") {
                "fmt "
            } else if msg.contains("data") || stage == "data" {
                "data"
            } else {
                "RIFF"
            };
            Error::Decode {
                chunk: chunk.into(),
                message: msg.into(),
            }
        }
        hound::Error::IoError(e) => Error::Decode {
            chunk: if stage == "data" { "data" } else { "RIFF" }.into(),
            message: format!("truncated or unreadable: {e}"),
        },
        other => Error::Decode {
            chunk: if stage == "data" { "data" } else { "fmt " }.into(),
            message: other.to_string(),
        },
    }
}

/// Writes the clip as mono 16-bit PCM.
pub fn write_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    encode_pcm16(clip, std::io::BufWriter::new(file)).map_err(|e| Error::io(path, hound_to_io(e)))
}

/// In-memory variant of [`write_wav`].
pub fn encode_wav<W: Write + Seek>(clip: &AudioClip, writer: W) -> Result<()> {
    encode_pcm16(clip, writer).map_err(|e| Error::io("<wav stream>", hound_to_io(e)))
}

fn encode_pcm16<W: Write + Seek>(clip: &AudioClip, writer: W) -> hound::Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, spec)?;
    for &s in &clip.samples {
        w.write_sample(quantize_i16(s))?;
    }
    w.finalize()
}

fn hound_to_io(err: hound::Error) -> std::io::Error {
    match err {
        hound::Error::IoError(e) => e,
        other => std::io::Error::other(other.to_string()),
    }
}

/// Inverse of the decoder's `/ 32768` scaling, saturating at the positive end.
pub fn quantize_i16(sample: f64) -> i16 {
    (sample * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Linear-interpolation resampler.
///
/// Output length is `round(len * target / source)`; output sample `n` reads the
/// input at fractional position `n * source / target`, holding the last sample
/// past the end.
pub fn resample_linear(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let ratio = f64::from(clip.sample_rate) / f64::from(target_rate);
    let out_len = (clip.len() as f64 * f64::from(target_rate) / f64::from(clip.sample_rate))
        .round()
        .max(1.0) as usize;
    let samples = interpolate_at(&clip.samples, out_len, ratio);
    AudioClip::from_clamped(clip.clip_id.clone(), samples, target_rate)
}

/// Reads `input` at positions `0, step, 2*step, ...` with linear interpolation.
pub(crate) fn interpolate_at(input: &[f64], out_len: usize, step: f64) -> Vec<f64> {
    let last = input.len() - 1;
    (0..out_len)
        .map(|n| {
            let pos = n as f64 * step;
            let i = pos.floor() as usize;
            if i >= last {
                return input[last];
            }
            let frac = pos - i as f64;
            if frac == 0.0 {
                input[i]
            } else {
                input[i] + (input[i + 1] - input[i]) * frac
            }
        })
        .collect()
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2πk/(n-1))`; `n = 1` gives `[1.0]`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    match n {
        0 => Err(Error::invalid("window length must be at least 1")),
        1 => Ok(vec![1.0]),
        _ => {
            let denom = (n - 1) as f64;
            Ok((0..n)
                .map(|k| 0.54 - 0.46 * (2.0 * PI * k as f64 / denom).cos())
                .collect())
        }
    }
}

/// Window length and hop in samples for the given durations.
pub fn frame_geometry(sample_rate: u32, window_seconds: f64, hop_seconds: f64) -> Result<(usize, usize)> {
    if !(window_seconds > 0.0) || !(hop_seconds > 0.0) {
        return Err(Error::invalid("window and hop durations must be positive"));
    }
    let rate = f64::from(sample_rate);
    let window = ((window_seconds * rate).round() as usize).max(1);
    let hop = ((hop_seconds * rate).round() as usize).max(1);
    Ok((window, hop))
}

/// Number of frames `frame_signal` produces: `1 + ceil(max(0, len - window) / hop)`.
pub fn frame_count(len: usize, window: usize, hop: usize) -> usize {
    1 + len.saturating_sub(window).div_ceil(hop)
}

/// Splits a clip into fixed-length frames at a regular hop. The trailing
/// partial frame (and any clip shorter than one window) is zero-padded.
pub fn frame_signal(clip: &AudioClip, window_seconds: f64, hop_seconds: f64) -> Result<Vec<Frame>> {
    let (window, hop) = frame_geometry(clip.sample_rate, window_seconds, hop_seconds)?;
    let samples = &clip.samples;
    let frames = (0..frame_count(samples.len(), window, hop))
        .map(|f| {
            let start = f * hop;
            // with hop > window the last frame may start past the end
            let from = start.min(samples.len());
            let end = (start + window).min(samples.len());
            let mut values = vec![0.0; window];
            values[..end - from].copy_from_slice(&samples[from..end]);
            Frame {
                values,
                start_index: start,
            }
        })
        .collect();
    Ok(frames)
}
