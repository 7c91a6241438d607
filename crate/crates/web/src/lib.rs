//! Browser bindings for the feature pipelines.
//!
//! Each exported function has a plain Rust twin (`*_impl`) so the logic is
//! testable off the wasm target.

use emoaudionet::audio::AudioClip;
use emoaudionet::augment::{add_noise, pitch_shift};
use emoaudionet::corpus::{synthesize_clip, SyntheticSpec};
use emoaudionet::features::WORKING_RATE;
use emoaudionet::spectro::IMAGE_SIDE;
use emoaudionet::{FeatureConfig, FeatureExtractor, Result};
use wasm_bindgen::prelude::*;

fn to_clip(samples: &[f32], sample_rate: u32) -> Result<AudioClip> {
    AudioClip::new("browser", samples.iter().map(|&s| s as f64).collect(), sample_rate)
}

fn to_f32(clip: &AudioClip) -> Vec<f32> {
    clip.samples().iter().map(|&s| s as f32).collect()
}

fn js(e: emoaudionet::Error) -> JsError {
    JsError::new(&e.to_string())
}

pub fn synth_impl(class: u32, seconds: f64, seed: u32) -> Result<Vec<f32>> {
    let spec = SyntheticSpec {
        classes: 24,
        clips_per_class: 1,
        duration_seconds: seconds,
        sample_rate: WORKING_RATE,
        seed: seed as u64,
    };
    spec.validate()?;
    if class as usize >= spec.classes {
        return Err(emoaudionet::Error::InvalidArgument(format!("class {class} must be below {}", spec.classes)));
    }
    Ok(to_f32(&synthesize_clip(&spec, class as usize, 0)?))
}

pub fn augment_impl(samples: &[f32], sample_rate: u32, noise: f64, semitones: f64, seed: u32) -> Result<Vec<f32>> {
    let clip = to_clip(samples, sample_rate)?;
    let shifted = pitch_shift(&clip, semitones)?;
    Ok(to_f32(&add_noise(&shifted, noise, seed as u64)?))
}

/// Spectrogram image as RGBA bytes, low frequencies on the bottom row.
pub fn spectrogram_impl(samples: &[f32], sample_rate: u32) -> Result<Vec<u8>> {
    let fx = FeatureExtractor::new(FeatureConfig::default())?;
    let image = fx.extract(&to_clip(samples, sample_rate)?)?.spectro;
    let mut rgba = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE * 4);
    for row in (0..IMAGE_SIDE).rev() {
        for px in image.pixels[row * IMAGE_SIDE * 3..(row + 1) * IMAGE_SIDE * 3].chunks_exact(3) {
            rgba.extend(px.iter().map(|&c| (c.clamp(0.0, 1.0) * 255.0).round() as u8));
            rgba.push(255);
        }
    }
    Ok(rgba)
}

pub fn mfcc_impl(samples: &[f32], sample_rate: u32) -> Result<Vec<f64>> {
    let fx = FeatureExtractor::new(FeatureConfig::default())?;
    Ok(fx.extract(&to_clip(samples, sample_rate)?)?.mfcc.values)
}

/// Harmonic tone of a synthetic class (fundamental `200 * (class + 1)` Hz) at 16 kHz.
#[wasm_bindgen]
pub fn synth_tone(class: u32, seconds: f64, seed: u32) -> std::result::Result<Vec<f32>, JsError> {
    synth_impl(class, seconds, seed).map_err(js)
}

/// Pitch shift down by `semitones`, then add uniform noise scaled by `noise`.
#[wasm_bindgen]
pub fn augment(samples: &[f32], sample_rate: u32, noise: f64, semitones: f64, seed: u32) -> std::result::Result<Vec<f32>, JsError> {
    augment_impl(samples, sample_rate, noise, semitones, seed).map_err(js)
}

#[wasm_bindgen]
pub fn spectrogram_rgba(samples: &[f32], sample_rate: u32) -> std::result::Result<Vec<u8>, JsError> {
    spectrogram_impl(samples, sample_rate).map_err(js)
}

#[wasm_bindgen]
pub fn mfcc_vector(samples: &[f32], sample_rate: u32) -> std::result::Result<Vec<f64>, JsError> {
    mfcc_impl(samples, sample_rate).map_err(js)
}

#[wasm_bindgen]
pub fn image_side() -> u32 {
    IMAGE_SIDE as u32
}

#[wasm_bindgen]
pub fn working_rate() -> u32 {
    WORKING_RATE
}
