//! Fixed-length cepstral input for the 1D stream.
//!
//! Per frame: Hamming window, power spectrum, mel filterbank, `ln(. + 1e-10)`,
//! orthonormal DCT-II, keep the first `cepstral_per_frame` coefficients.
//! Frame cepstra are concatenated in time order and truncated or zero-padded
//! to `output_dim`.

use serde::{Deserialize, Serialize};

use crate::audio::{frame_signal, hamming_window, AudioClip};
use crate::dsp::{dct2, PowerSpectrum};
use crate::error::{Error, Result};

/// Floor added before the logarithm so silent bands stay finite.
pub const LOG_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub window_seconds: f64,
    pub hop_seconds: f64,
    pub mel_filters: usize,
    pub cepstral_per_frame: usize,
    pub output_dim: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            window_seconds: 2.5,
            hop_seconds: 0.5,
            mel_filters: 24,
            cepstral_per_frame: 24,
            output_dim: 177,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mel_filters < 2 {
            return Err(Error::invalid("mel_filters must be at least 2"));
        }
        if self.output_dim == 0 {
            return Err(Error::invalid("output_dim must be at least 1"));
        }
        if self.cepstral_per_frame == 0 || self.cepstral_per_frame > self.mel_filters {
            return Err(Error::invalid("cepstral_per_frame must be in 1..=mel_filters"));
        }
        if !(self.window_seconds > 0.0) || !(self.hop_seconds > 0.0) {
            return Err(Error::invalid("window and hop durations must be positive"));
        }
        Ok(())
    }
}

/// The 1D-stream input vector for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccInput {
    pub values: Vec<f64>,
    pub clip_id: String,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced in mel between 0 Hz and Nyquist.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    rows: Vec<Vec<f64>>,
    fft_bins: usize,
}

impl MelFilterbank {
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn n_filters(&self) -> usize {
        self.rows.len()
    }

    pub fn fft_bins(&self) -> usize {
        self.fft_bins
    }

    pub fn apply(&self, power: &[f64]) -> Result<Vec<f64>> {
        if power.len() != self.fft_bins {
            return Err(Error::shape("mel filterbank input", &[self.fft_bins], &[power.len()]));
        }
        Ok(self
            .rows
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect())
    }
}

/// Builds an `n_filters x fft_bins` filterbank for a one-sided spectrum of
/// `fft_bins` bins spanning `0..=sample_rate/2`.
pub fn build_mel_filterbank(n_filters: usize, fft_bins: usize, sample_rate: u32) -> Result<MelFilterbank> {
    if n_filters < 2 {
        return Err(Error::invalid("a mel filterbank needs at least 2 filters"));
    }
    if fft_bins < n_filters + 2 {
        return Err(Error::invalid(format!(
            "{fft_bins} FFT bins cannot hold {n_filters} filters (need at least {})",
            n_filters + 2
        )));
    }
    if sample_rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let nyquist = f64::from(sample_rate) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = nyquist / (fft_bins - 1) as f64;

    let rows = edges
        .windows(3)
        .map(|e| {
            let (lo, center, hi) = (e[0], e[1], e[2]);
            let mut row: Vec<f64> = (0..fft_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= center {
                        (f - lo) / (center - lo)
                    } else {
                        (hi - f) / (hi - center)
                    }
                })
                .collect();
            // narrow filter fell between bins
            if row.iter().all(|&w| w == 0.0) {
                let k = ((center / bin_hz).round() as usize).min(fft_bins - 1);
                row[k] = 1.0;
            }
            row
        })
        .collect();
    Ok(MelFilterbank { rows, fft_bins })
}

/// Cepstral coefficients of one frame (already windowed by the caller).
pub fn compute_mfcc_frame(frame: &[f64], config: &MfccConfig, filterbank: &MelFilterbank) -> Result<Vec<f64>> {
    let ps = PowerSpectrum::for_frame_len(frame.len());
    cepstra_with(&ps, frame, config, filterbank)
}

fn cepstra_with(
    ps: &PowerSpectrum,
    frame: &[f64],
    config: &MfccConfig,
    filterbank: &MelFilterbank,
) -> Result<Vec<f64>> {
    if ps.bins() != filterbank.fft_bins() {
        return Err(Error::shape(
            "filterbank vs power spectrum",
            &[ps.bins()],
            &[filterbank.fft_bins()],
        ));
    }
    let log_mel = log_mel_energies(&ps.compute(frame), filterbank)?;
    let mut c = dct2(&log_mel);
    c.truncate(config.cepstral_per_frame);
    Ok(c)
}

pub fn log_mel_energies(power: &[f64], filterbank: &MelFilterbank) -> Result<Vec<f64>> {
    Ok(filterbank
        .apply(power)?
        .into_iter()
        .map(|e| (e + LOG_FLOOR).ln())
        .collect())
}

/// Reusable per-rate extractor: the window, FFT plan and filterbank are built once.
#[derive(Debug, Clone)]
pub struct MfccExtractor {
    config: MfccConfig,
    sample_rate: u32,
    window: Vec<f64>,
    spectrum: PowerSpectrum,
    filterbank: MelFilterbank,
}

impl MfccExtractor {
    pub fn new(config: MfccConfig, sample_rate: u32) -> Result<Self> {
        config.validate()?;
        let (window_len, _) = crate::audio::frame_geometry(sample_rate, config.window_seconds, config.hop_seconds)?;
        let window = hamming_window(window_len)?;
        let spectrum = PowerSpectrum::for_frame_len(window_len);
        let filterbank = build_mel_filterbank(config.mel_filters, spectrum.bins(), sample_rate)?;
        Ok(Self {
            config,
            sample_rate,
            window,
            spectrum,
            filterbank,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Per-frame cepstra in time order.
    pub fn frame_cepstra(&self, clip: &AudioClip) -> Result<Vec<Vec<f64>>> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::Config(format!(
                "extractor built for {} Hz, clip is {} Hz",
                self.sample_rate,
                clip.sample_rate()
            )));
        }
        frame_signal(clip, self.config.window_seconds, self.config.hop_seconds)?
            .iter()
            .map(|f| {
                let windowed: Vec<f64> = f.values.iter().zip(&self.window).map(|(x, w)| x * w).collect();
                cepstra_with(&self.spectrum, &windowed, &self.config, &self.filterbank)
            })
            .collect()
    }

    pub fn extract(&self, clip: &AudioClip) -> Result<MfccInput> {
        let mut values: Vec<f64> = self.frame_cepstra(clip)?.into_iter().flatten().collect();
        values.resize(self.config.output_dim, 0.0);
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite MFCC for clip {}", clip.clip_id())));
        }
        Ok(MfccInput {
            values,
            clip_id: clip.clip_id().to_owned(),
        })
    }
}

/// Time-ordered concatenation of frame cepstra, truncated or zero-padded to
/// `config.output_dim`.
pub fn assemble_mfcc_input(clip: &AudioClip, config: &MfccConfig) -> Result<MfccInput> {
    MfccExtractor::new(config.clone(), clip.sample_rate())?.extract(clip)
}
