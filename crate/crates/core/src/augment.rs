//! Training-set augmentation: additive uniform noise and duration-preserving
//! downward pitch shifts.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{interpolate_at, AudioClip};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub noise_factors: Vec<f64>,
    pub pitch_semitones: Vec<f64>,
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_factors: vec![0.01, 0.02, 0.03],
            pitch_semitones: vec![0.5, 2.0, 5.0],
            seed: 0,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.noise_factors.iter().find(|a| !(**a >= 0.0) || !a.is_finite()) {
            return Err(Error::invalid(format!("noise factor {a} must be finite and >= 0")));
        }
        if let Some(s) = self.pitch_semitones.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("pitch shift {s} must be finite and >= 0")));
        }
        Ok(())
    }

    /// Number of clips `augment_corpus` returns for `n` inputs.
    pub fn output_len(&self, n: usize) -> usize {
        n * (1 + self.noise_factors.len() + self.pitch_semitones.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Transform {
    Original,
    Noise { alpha: f64 },
    Pitch { semitones: f64 },
}

impl Transform {
    /// Suffix appended to the source clip id, e.g. `__noise0.01`.
    pub fn suffix(&self) -> String {
        match self {
            Transform::Original => String::new(),
            Transform::Noise { alpha } => format!("__noise{alpha}"),
            Transform::Pitch { semitones } => format!("__pitch{semitones}"),
        }
    }
}

/// A clip together with the original it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedClip {
    pub clip: AudioClip,
    pub source_id: String,
    pub transform: Transform,
}

/// `z = x + alpha * r`, `r` i.i.d. uniform in `[-1, 1)`, clamped to `[-1, 1]`.
pub fn add_noise(clip: &AudioClip, alpha: f64, seed: u64) -> Result<AudioClip> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::invalid(format!("noise factor {alpha} must be finite and >= 0")));
    }
    if alpha == 0.0 {
        return Ok(clip.clone());
    }
    let mut rng = seed::rng(seed);
    let samples = clip
        .samples()
        .iter()
        .map(|&x| x + alpha * rng.random_range(-1.0..1.0))
        .collect();
    AudioClip::from_clamped(clip.clip_id().to_owned(), samples, clip.sample_rate())
}

/// Lowers the pitch by `semitones_down` while keeping the clip length.
///
/// The clip is first read at rate `2^(-s/12)` (lower pitch, longer), then
/// compressed back to the original length with WSOLA overlap-add, which
/// changes tempo without touching pitch.
pub fn pitch_shift(clip: &AudioClip, semitones_down: f64) -> Result<AudioClip> {
    if !(semitones_down >= 0.0) || !semitones_down.is_finite() {
        return Err(Error::invalid(format!(
            "pitch shift {semitones_down} must be finite and >= 0"
        )));
    }
    if semitones_down == 0.0 {
        return Ok(clip.clone());
    }
    let ratio = (-semitones_down / 12.0).exp2();
    let len = clip.len();
    let stretched_len = ((len as f64 / ratio).round() as usize).max(1);
    let lowered = interpolate_at(clip.samples(), stretched_len, ratio);
    let out = wsola(&lowered, len, clip.sample_rate());
    AudioClip::from_clamped(clip.clip_id().to_owned(), out, clip.sample_rate())
}

/// Waveform-similarity overlap-add time scaling of `input` to exactly `out_len` samples.
fn wsola(input: &[f64], out_len: usize, sample_rate: u32) -> Vec<f64> {
    // ~40 ms frames, 50% overlap, +-10 ms search
    let frame = ((f64::from(sample_rate) * 0.04).round() as usize).max(8) & !1;
    let synth_hop = frame / 2;
    let tolerance = synth_hop / 2;
    let analysis_hop = synth_hop as f64 * input.len() as f64 / out_len as f64;
    let window: Vec<f64> = (0..frame)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos())
        .collect();
    let at = |i: isize| -> f64 {
        if i >= 0 && (i as usize) < input.len() {
            input[i as usize]
        } else {
            0.0
        }
    };

    let mut out = vec![0.0; out_len + frame];
    let mut norm = vec![0.0; out_len + frame];
    let mut prev_pos: isize = 0;
    let mut k = 0usize;
    while k * synth_hop < out_len {
        let pos = if k == 0 {
            0
        } else {
            let nominal = (k as f64 * analysis_hop).round() as isize;
            let natural = prev_pos + synth_hop as isize;
            let mut best = (nominal, f64::MIN);
            for delta in -(tolerance as isize)..=tolerance as isize {
                let cand = nominal + delta;
                if cand < 0 {
                    continue;
                }
                let score: f64 = (0..frame as isize).map(|n| at(cand + n) * at(natural + n)).sum();
                if score > best.1 {
                    best = (cand, score);
                }
            }
            best.0
        };
        let base = k * synth_hop;
        for (n, w) in window.iter().enumerate() {
            out[base + n] += w * at(pos + n as isize);
            norm[base + n] += w;
        }
        prev_pos = pos;
        k += 1;
    }
    out.truncate(out_len);
    out.iter()
        .zip(&norm)
        .map(|(&v, &w)| if w > 1e-8 { v / w } else { v })
        .collect()
}

/// Originals plus one noisy copy per `alpha` and one pitch-shifted copy per
/// semitone value, grouped per source clip in that order.
pub fn augment_corpus(clips: &[AudioClip], spec: &AugmentSpec) -> Result<Vec<AugmentedClip>> {
    if clips.is_empty() {
        return Err(Error::invalid("cannot augment an empty corpus"));
    }
    spec.validate()?;
    let groups = clips
        .par_iter()
        .map(|clip| augment_one(clip, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(groups.into_iter().flatten().collect())
}

fn augment_one(clip: &AudioClip, spec: &AugmentSpec) -> Result<Vec<AugmentedClip>> {
    let source_id = clip.clip_id().to_owned();
    let make = |transform: Transform, audio: AudioClip| AugmentedClip {
        clip: audio.with_id(format!("{source_id}{}", transform.suffix())),
        source_id: source_id.clone(),
        transform,
    };
    let mut out = Vec::with_capacity(1 + spec.noise_factors.len() + spec.pitch_semitones.len());
    out.push(make(Transform::Original, clip.clone()));
    let clip_seed = seed::derive_str(spec.seed, &source_id);
    for (i, &alpha) in spec.noise_factors.iter().enumerate() {
        let noisy = add_noise(clip, alpha, seed::derive(clip_seed, &[i as u64]))?;
        out.push(make(Transform::Noise { alpha }, noisy));
    }
    for &semitones in &spec.pitch_semitones {
        out.push(make(Transform::Pitch { semitones }, pitch_shift(clip, semitones)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{peak_frequency, PowerSpectrum};

    fn sine(freq: f64, seconds: f64, sr: u32) -> AudioClip {
        let n = (seconds * f64::from(sr)) as usize;
        let s = (0..n)
            .map(|t| 0.5 * (2.0 * PI * freq * t as f64 / f64::from(sr)).sin())
            .collect();
        AudioClip::new("sine", s, sr).unwrap()
    }

    fn peak(clip: &AudioClip) -> f64 {
        let ps = PowerSpectrum::for_frame_len(clip.len());
        peak_frequency(&ps.compute(clip.samples()), ps.fft_len(), clip.sample_rate())
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    #[test]
    fn zero_alpha_is_identity() {
        let c = sine(300.0, 0.1, 8000);
        assert_eq!(add_noise(&c, 0.0, 9).unwrap(), c);
        assert!(add_noise(&c, -0.1, 9).is_err());
    }

    #[test]
    fn noise_bound_on_silence() {
        let c = AudioClip::new("z", vec![0.0; 4000], 8000).unwrap();
        let z = add_noise(&c, 0.03, 1).unwrap();
        assert!(z.samples().iter().all(|v| v.abs() <= 0.03));
        assert!(z.samples().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn noise_seeds() {
        let c = sine(300.0, 0.1, 8000);
        assert_eq!(add_noise(&c, 0.02, 5).unwrap(), add_noise(&c, 0.02, 5).unwrap());
        assert_ne!(add_noise(&c, 0.02, 5).unwrap(), add_noise(&c, 0.02, 6).unwrap());
    }

    #[test]
    fn noise_rms_bound() {
        let c = sine(300.0, 0.5, 8000);
        for alpha in [0.01, 0.5, 2.0] {
            let z = add_noise(&c, alpha, 3).unwrap();
            assert!(rms(z.samples()) <= rms(c.samples()) + alpha);
        }
    }

    #[test]
    fn pitch_zero_is_identity() {
        let c = sine(440.0, 0.2, 16000);
        assert_eq!(pitch_shift(&c, 0.0).unwrap(), c);
    }

    #[test]
    fn octave_down() {
        let c = sine(440.0, 1.0, 16000);
        let p = pitch_shift(&c, 12.0).unwrap();
        assert_eq!(p.len(), c.len());
        let f = peak(&p);
        assert!((f - 220.0).abs() <= 0.02 * 220.0, "peak {f}");
    }

    #[test]
    fn two_semitones_down() {
        let c = sine(440.0, 1.0, 16000);
        let f = peak(&pitch_shift(&c, 2.0).unwrap());
        let expect = 440.0 * (-2.0f64 / 12.0).exp2();
        assert!((expect - 392.0).abs() < 0.01);
        assert!((f - expect).abs() <= 0.02 * expect, "peak {f}");
    }

    #[test]
    fn corpus_counts_and_names() {
        let clips: Vec<AudioClip> = (0..10)
            .map(|i| sine(200.0 + 10.0 * f64::from(i), 0.1, 8000).with_id(format!("c{i}")))
            .collect();
        let out = augment_corpus(&clips, &AugmentSpec::default()).unwrap();
        assert_eq!(out.len(), 70);
        assert_eq!(out[1].clip.clip_id(), "c0__noise0.01");
        assert_eq!(out[4].clip.clip_id(), "c0__pitch0.5");
        assert_eq!(out[6].clip.clip_id(), "c0__pitch5");
        assert!(out.iter().all(|a| a.clip.sample_rate() == 8000));
        assert!(out.iter().all(|a| a.clip.clip_id().starts_with(&a.source_id)));

        let empty = AugmentSpec {
            noise_factors: vec![],
            pitch_semitones: vec![],
            seed: 1,
        };
        let same = augment_corpus(&clips, &empty).unwrap();
        assert_eq!(same.len(), 10);
        assert!(same.iter().zip(&clips).all(|(a, c)| &a.clip == c));
        assert!(augment_corpus(&[], &empty).is_err());
    }

    #[test]
    fn corpus_is_deterministic() {
        let clips = vec![sine(250.0, 0.2, 8000).with_id("a"), sine(330.0, 0.2, 8000).with_id("b")];
        let spec = AugmentSpec {
            seed: 42,
            ..AugmentSpec::default()
        };
        assert_eq!(augment_corpus(&clips, &spec).unwrap(), augment_corpus(&clips, &spec).unwrap());
    }
}
