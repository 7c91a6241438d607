//! Spectral building blocks shared by both feature pipelines.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Smallest power of two `>= n` (and at least 1).
pub fn fft_length(n: usize) -> usize {
    n.max(1).next_power_of_two()
}

/// One-sided power spectrum `|X_k|^2`, `k = 0..=n/2`, for frames zero-padded
/// to a fixed power-of-two length `n`.
#[derive(Clone)]
pub struct PowerSpectrum {
    fft: Arc<dyn Fft<f64>>,
    len: usize,
}

impl std::fmt::Debug for PowerSpectrum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PowerSpectrum").field("len", &self.len).finish()
    }
}

impl PowerSpectrum {
    /// Plans an FFT of `fft_length(frame_len)` points.
    pub fn for_frame_len(frame_len: usize) -> Self {
        let len = fft_length(frame_len);
        let fft = FftPlanner::new().plan_fft_forward(len);
        Self { fft, len }
    }

    pub fn fft_len(&self) -> usize {
        self.len
    }

    /// Number of one-sided bins, `n/2 + 1`.
    pub fn bins(&self) -> usize {
        self.len / 2 + 1
    }

    /// Frames longer than the planned length are truncated.
    pub fn compute(&self, frame: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = frame
            .iter()
            .take(self.len)
            .map(|&x| Complex64::new(x, 0.0))
            .collect();
        buf.resize(self.len, Complex64::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.bins()].iter().map(|c| c.norm_sqr()).collect()
    }
}

/// Power spectrum of a single frame, zero-padded to the next power of two.
pub fn power_spectrum(frame: &[f64]) -> Vec<f64> {
    PowerSpectrum::for_frame_len(frame.len()).compute(frame)
}

/// Orthonormal DCT-II.
pub fn dct2(input: &[f64]) -> Vec<f64> {
    let n = input.len();
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    (0..n)
        .map(|k| {
            let sum: f64 = input
                .iter()
                .enumerate()
                .map(|(j, &x)| x * (PI * k as f64 * (2 * j + 1) as f64 / (2.0 * nf)).cos())
                .sum();
            sum * dct_scale(k, nf)
        })
        .collect()
}

/// Orthonormal DCT-III, the inverse of [`dct2`].
pub fn dct3(coeffs: &[f64]) -> Vec<f64> {
    let n = coeffs.len();
    if n == 0 {
        return Vec::new();
    }
    let nf = n as f64;
    (0..n)
        .map(|j| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, &c)| c * dct_scale(k, nf) * (PI * k as f64 * (2 * j + 1) as f64 / (2.0 * nf)).cos())
                .sum()
        })
        .collect()
}

#[inline]
fn dct_scale(k: usize, n: f64) -> f64 {
    if k == 0 {
        (1.0 / n).sqrt()
    } else {
        (2.0 / n).sqrt()
    }
}

/// Frequency (Hz) of the strongest bin of a power spectrum, refined by
/// parabolic interpolation over the log-power of the neighbouring bins.
pub fn peak_frequency(power: &[f64], fft_len: usize, sample_rate: u32) -> f64 {
    let (k, _) = power
        .iter()
        .enumerate()
        .skip(1)
        .fold((0, f64::MIN), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
    let mut pos = k as f64;
    if k > 0 && k + 1 < power.len() {
        let (a, b, c) = (
            power[k - 1].max(1e-300).ln(),
            power[k].max(1e-300).ln(),
            power[k + 1].max(1e-300).ln(),
        );
        let denom = a - 2.0 * b + c;
        if denom.abs() > 1e-12 {
            pos += 0.5 * (a - c) / denom;
        }
    }
    pos * f64::from(sample_rate) / fft_len as f64
}
