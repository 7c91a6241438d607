//! Clip-to-network-input plumbing: resample to the working rate, then run
//! both feature pipelines.
//!
//! Features are rounded through `f32` before use. That is the precision of the
//! on-disk cache, so a freshly computed example and a cached one feed the
//! network identical bits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{resample_linear, AudioClip};
use crate::error::{Error, Result};
use crate::mfcc::{MfccConfig, MfccExtractor, MfccInput};
use crate::nn::Tensor;
use crate::spectro::{spectro_image, SpectroImage, CHANNELS, IMAGE_SIDE};

pub const WORKING_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Every clip is resampled to this rate before extraction.
    pub sample_rate: u32,
    pub mfcc: MfccConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: WORKING_RATE,
            mfcc: MfccConfig::default(),
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        self.mfcc.validate()
    }

    /// Stable identity of the configuration, used in cache keys.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(self).expect("plain struct serializes")
    }

    pub fn spectro_dim(&self) -> usize {
        IMAGE_SIDE * IMAGE_SIDE * CHANNELS
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatures {
    pub mfcc: MfccInput,
    pub spectro: SpectroImage,
}

impl ClipFeatures {
    pub fn clip_id(&self) -> &str {
        &self.mfcc.clip_id
    }

    /// `[224, 224, 3]` and `[dim, 1]` tensors.
    pub fn tensors(&self) -> Result<(Tensor, Tensor)> {
        let spec = Tensor::new(&self.spectro.shape(), self.spectro.pixels.clone())?;
        let mfcc = Tensor::new(&[self.mfcc.values.len(), 1], self.mfcc.values.clone())?;
        Ok((spec, mfcc))
    }
}

pub(crate) fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

/// Reusable extractor for one configuration.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    config: FeatureConfig,
    mfcc: MfccExtractor,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let mfcc = MfccExtractor::new(config.mfcc.clone(), config.sample_rate)?;
        Ok(Self { config, mfcc })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<ClipFeatures> {
        let clip = resample_linear(clip, self.config.sample_rate)?;
        let mut mfcc = self.mfcc.extract(&clip)?;
        let mut spectro = spectro_image(&clip)?;
        round_f32(&mut mfcc.values);
        round_f32(&mut spectro.pixels);
        Ok(ClipFeatures { mfcc, spectro })
    }

    /// Parallel over clips, output in input order.
    pub fn extract_all(&self, clips: &[AudioClip]) -> Result<Vec<ClipFeatures>> {
        clips.par_iter().map(|c| self.extract(c)).collect()
    }
}
