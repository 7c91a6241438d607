//! Colour spectrogram image for the 2D stream.
//!
//! The clip is cut into 256 equal segments, each Hamming-windowed and turned
//! into a one-sided power spectrum. The matrix is dB-scaled, min-max
//! normalized, resized to 224x224 and mapped through a fixed colormap.

use std::path::Path;

use crate::audio::{hamming_window, AudioClip};
use crate::dsp::PowerSpectrum;
use crate::error::{Error, Result};

pub const SEGMENTS: usize = 256;
pub const IMAGE_SIDE: usize = 224;
pub const CHANNELS: usize = 3;
pub const DB_FLOOR: f64 = 1e-10;

/// Power (or normalized dB) values, `freq_bins x SEGMENTS`, row-major.
/// Row 0 is the DC bin; column `k` is segment `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroMatrix {
    pub values: Vec<f64>,
    pub freq_bins: usize,
}

impl SpectroMatrix {
    pub fn segment_count(&self) -> usize {
        SEGMENTS
    }

    pub fn get(&self, bin: usize, segment: usize) -> f64 {
        self.values[bin * SEGMENTS + segment]
    }

    pub fn column(&self, segment: usize) -> Vec<f64> {
        (0..self.freq_bins).map(|b| self.get(b, segment)).collect()
    }
}

/// A 224x224x3 image, row-major, channel-last, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroImage {
    pub pixels: Vec<f64>,
    pub clip_id: String,
    /// Gray values that had to be clamped into `[0, 1]` before colouring.
    pub clamped_values: usize,
}

impl SpectroImage {
    pub fn shape(&self) -> [usize; 3] {
        [IMAGE_SIDE, IMAGE_SIDE, CHANNELS]
    }
}

/// Segment length for a clip of `len` samples.
pub fn segment_len(len: usize) -> usize {
    len.div_ceil(SEGMENTS).max(1)
}

pub fn compute_spectro_matrix(clip: &AudioClip) -> Result<SpectroMatrix> {
    let samples = clip.samples();
    let seg = segment_len(samples.len());
    let window = hamming_window(seg)?;
    let spectrum = PowerSpectrum::for_frame_len(seg);
    let bins = spectrum.bins();
    let mut values = vec![0.0; bins * SEGMENTS];
    let mut buf = vec![0.0; seg];
    for s in 0..SEGMENTS {
        let start = (s * seg).min(samples.len());
        let end = (start + seg).min(samples.len());
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (i, x) in samples[start..end].iter().enumerate() {
            buf[i] = x * window[i];
        }
        for (b, p) in spectrum.compute(&buf).into_iter().enumerate() {
            values[b * SEGMENTS + s] = p;
        }
    }
    Ok(SpectroMatrix { values, freq_bins: bins })
}

/// `10 log10(v + 1e-10)`, then min-max to `[0, 1]`; a constant matrix maps to zeros.
pub fn db_scale_normalize(matrix: &SpectroMatrix) -> Result<SpectroMatrix> {
    if matrix.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("spectrogram matrix has non-finite values".into()));
    }
    let db: Vec<f64> = matrix.values.iter().map(|&v| 10.0 * (v + DB_FLOOR).log10()).collect();
    let (lo, hi) = db
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    let values = if span > 0.0 {
        db.iter().map(|&v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; db.len()]
    };
    Ok(SpectroMatrix {
        values,
        freq_bins: matrix.freq_bins,
    })
}

/// Corner-aligned bilinear resize of a row-major `rows x cols` grid.
pub fn resize_bilinear(values: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || values.len() != rows * cols {
        return Err(Error::shape("bilinear resize input", &[rows, cols], &[values.len()]));
    }
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_in == 1 || n_out == 1 {
            return (0, 0, 0.0);
        }
        let pos = (i * (n_in - 1)) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, pos - lo as f64)
    };
    let at = |r: usize, c: usize| values[r * cols + c];
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for i in 0..out_rows {
        let (r0, r1, fy) = coord(i, rows, out_rows);
        for j in 0..out_cols {
            let (c0, c1, fx) = coord(j, cols, out_cols);
            let top = lerp(at(r0, c0), at(r0, c1), fx);
            let bottom = lerp(at(r1, c0), at(r1, c1), fx);
            out.push(lerp(top, bottom, fy));
        }
    }
    Ok(out)
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    if t == 0.0 {
        a
    } else if t == 1.0 {
        b
    } else {
        a + (b - a) * t
    }
}

/// Resizes a normalized matrix to the 224x224 gray image.
pub fn resize_to_image(matrix: &SpectroMatrix) -> Result<Vec<f64>> {
    resize_bilinear(&matrix.values, matrix.freq_bins, SEGMENTS, IMAGE_SIDE, IMAGE_SIDE)
}

const COLORMAP: [(f64, [f64; 3]); 5] = [
    (0.00, [0.0, 0.0, 0.3]),
    (0.25, [0.0, 0.3, 1.0]),
    (0.50, [0.0, 0.9, 0.3]),
    (0.75, [1.0, 0.9, 0.0]),
    (1.00, [0.9, 0.0, 0.0]),
];

/// Piecewise-linear RGB for a gray value in `[0, 1]`.
pub fn colormap(gray: f64) -> [f64; 3] {
    let g = gray.clamp(0.0, 1.0);
    for pair in COLORMAP.windows(2) {
        let (p0, c0) = pair[0];
        let (p1, c1) = pair[1];
        if g <= p1 {
            let t = (g - p0) / (p1 - p0);
            return [lerp(c0[0], c1[0], t), lerp(c0[1], c1[1], t), lerp(c0[2], c1[2], t)];
        }
    }
    COLORMAP[4].1
}

pub fn apply_colormap(gray: &[f64], clip_id: impl Into<String>) -> Result<SpectroImage> {
    if gray.len() != IMAGE_SIDE * IMAGE_SIDE {
        return Err(Error::shape("colormap input", &[IMAGE_SIDE, IMAGE_SIDE], &[gray.len()]));
    }
    let mut clamped_values = 0;
    let mut pixels = Vec::with_capacity(gray.len() * CHANNELS);
    for &g in gray {
        if !(0.0..=1.0).contains(&g) {
            clamped_values += 1;
        }
        pixels.extend_from_slice(&colormap(g));
    }
    Ok(SpectroImage {
        pixels,
        clip_id: clip_id.into(),
        clamped_values,
    })
}

/// Full clip -> image pipeline.
pub fn spectro_image(clip: &AudioClip) -> Result<SpectroImage> {
    let matrix = db_scale_normalize(&compute_spectro_matrix(clip)?)?;
    apply_colormap(&resize_to_image(&matrix)?, clip.clip_id())
}

/// 8-bit RGB dump of an image, for eyeballing.
pub fn write_png(image: &SpectroImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(std::io::BufWriter::new(file), IMAGE_SIDE as u32, IMAGE_SIDE as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = image.pixels.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e.to_string()));
    encoder
        .write_header()
        .map_err(to_io)?
        .write_image_data(&bytes)
        .map_err(to_io)
}
