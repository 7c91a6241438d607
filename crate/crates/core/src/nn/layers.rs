//! Layers with explicit forward caches and hand-written backward passes.
//!
//! Activations are channel-last: `[L, C]` for 1-D signals and `[H, W, C]`
//! for images. Forward takes `&self` and returns a [`Cache`], so a frozen
//! network can run forward/backward for many examples concurrently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Tensor};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward settings. Dropout masks are keyed by `seed` and the layer index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub seed: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            seed,
        }
    }
}

/// Declarative description of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv1d { channels: usize, kernel: usize, padding: Padding },
    Conv2d { channels: usize, kernel: [usize; 2], padding: Padding },
    Relu,
    Dropout { rate: f64 },
    Maxpool1d { window: usize, stride: usize },
    Maxpool2d { window: usize, stride: usize },
    Dense { units: usize },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Relu,
    Dropout { rate: f64 },
    MaxPool(MaxPool),
    Dense(Dense),
    Flatten,
}

/// Saved forward state needed by the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv { input: Tensor },
    Relu { active: Vec<bool> },
    Dropout { scale: Option<Vec<f64>> },
    MaxPool { argmax: Vec<usize>, in_shape: Vec<usize> },
    Dense { input: Vec<f64> },
    Flatten { in_shape: Vec<usize> },
}

// ---------------------------------------------------------------------------
// GEMM helper

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c: m x n` (row-major `c`).
/// `a` and `b` are addressed through (row, column) strides so transposes are free.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m.saturating_sub(1) * rsa + k.saturating_sub(1) * csa < a.len().max(1));
    assert!(k.saturating_sub(1) * rsb + n.saturating_sub(1) * csb < b.len().max(1));
    assert_eq!(c.len(), m * n);
    // SAFETY: the asserts above bound every strided access into a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// Stride-1 cross-correlation over one (`[L, Cin]`) or two (`[H, W, Cin]`)
/// spatial axes. Kernels are `[K, Cin, Cout]` or `[Kh, Kw, Cin, Cout]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub kernel: Parameter,
    pub bias: Parameter,
    pub padding: Padding,
    spatial: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn padded_extent(n: usize, k: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        // extra zero goes on the right/bottom for even kernels
        Padding::Same => Some((n, (k - 1) / 2)),
        Padding::Valid => (k <= n).then(|| (n - k + 1, 0)),
    }
}

impl Conv {
    pub fn conv1d(kernel: Parameter, bias: Parameter, padding: Padding) -> Result<Self> {
        Self::with_spatial(kernel, bias, padding, 1)
    }

    pub fn conv2d(kernel: Parameter, bias: Parameter, padding: Padding) -> Result<Self> {
        Self::with_spatial(kernel, bias, padding, 2)
    }

    fn with_spatial(kernel: Parameter, bias: Parameter, padding: Padding, spatial: usize) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != spatial + 2 || ks.contains(&0) {
            return Err(Error::shape(
                format!("conv{spatial}d kernel rank"),
                &vec![1; spatial + 2],
                ks,
            ));
        }
        let cout = ks[spatial + 1];
        if bias.shape() != [cout] {
            return Err(Error::shape(format!("conv{spatial}d bias"), &[cout], bias.shape()));
        }
        Ok(Self {
            kernel,
            bias,
            padding,
            spatial,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[self.spatial + 1]
    }

    fn geom(&self, in_shape: &[usize]) -> Result<ConvGeom> {
        let ks = self.kernel.shape();
        let (kh, kw, cin, cout) = if self.spatial == 1 {
            (1, ks[0], ks[1], ks[2])
        } else {
            (ks[0], ks[1], ks[2], ks[3])
        };
        let (h, w, c) = match (self.spatial, in_shape) {
            (1, &[l, c]) => (1, l, c),
            (2, &[h, w, c]) => (h, w, c),
            _ => {
                let mut expected = vec![0; self.spatial];
                expected.push(cin);
                return Err(Error::shape(format!("conv{}d input", self.spatial), &expected, in_shape));
            }
        };
        if c != cin {
            let mut expected = in_shape.to_vec();
            *expected.last_mut().unwrap() = cin;
            return Err(Error::shape(format!("conv{}d input channels", self.spatial), &expected, in_shape));
        }
        let too_small = || {
            Error::shape(
                format!("conv{}d input smaller than kernel", self.spatial),
                &[kh, kw],
                in_shape,
            )
        };
        let (oh, pad_top) = padded_extent(h, kh, self.padding).ok_or_else(too_small)?;
        let (ow, pad_left) = padded_extent(w, kw, self.padding).ok_or_else(too_small)?;
        Ok(ConvGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    fn out_shape(&self, g: &ConvGeom) -> Vec<usize> {
        if self.spatial == 1 {
            vec![g.ow, g.cout]
        } else {
            vec![g.oh, g.ow, g.cout]
        }
    }

    fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        Ok(self.out_shape(&self.geom(in_shape)?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let g = self.geom(x.shape())?;
        let mut out = vec![0.0; g.positions() * g.cout];
        if g.cout % 8 == 0 {
            conv_forward::<8>(&g, x.data(), self.kernel.data(), self.bias.data(), &mut out);
        } else {
            conv_forward::<1>(&g, x.data(), self.kernel.data(), self.bias.data(), &mut out);
        }
        let out = Tensor::new(&self.out_shape(&g), out)?;
        Ok((out, Cache::Conv { input: x.clone() }))
    }

    fn backward(&self, x: &Tensor, grad: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        let g = self.geom(x.shape())?;
        grad.expect_shape("conv gradient", &self.out_shape(&g))?;
        let dy = grad.data();
        let mut dk = vec![0.0; self.kernel.len()];
        if g.cout % 8 == 0 {
            conv_kernel_grad::<8>(&g, x.data(), dy, &mut dk);
        } else {
            conv_kernel_grad::<1>(&g, x.data(), dy, &mut dk);
        }
        let mut db = vec![0.0; g.cout];
        for row in dy.chunks_exact(g.cout) {
            for (b, v) in db.iter_mut().zip(row) {
                *b += v;
            }
        }
        let dx = if need_input {
            // Stride 1: dx is dy correlated with the spatially flipped,
            // channel-transposed kernel under the complementary padding.
            let t = ConvGeom {
                h: g.oh,
                w: g.ow,
                cin: g.cout,
                kh: g.kh,
                kw: g.kw,
                cout: g.cin,
                oh: g.h,
                ow: g.w,
                pad_top: g.kh - 1 - g.pad_top,
                pad_left: g.kw - 1 - g.pad_left,
            };
            let k = self.kernel.data();
            let mut flipped = vec![0.0; k.len()];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let src = ((g.kh - 1 - ky) * g.kw + (g.kw - 1 - kx)) * g.cin * g.cout;
                    let dst = (ky * g.kw + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        for co in 0..g.cout {
                            flipped[dst + co * g.cin + ci] = k[src + ci * g.cout + co];
                        }
                    }
                }
            }
            let zero = vec![0.0; g.cin];
            let mut dx = vec![0.0; x.len()];
            if g.cin % 8 == 0 {
                conv_forward::<8>(&t, dy, &flipped, &zero, &mut dx);
            } else {
                conv_forward::<1>(&t, dy, &flipped, &zero, &mut dx);
            }
            Some(Tensor::new(x.shape(), dx)?)
        } else {
            None
        };
        Ok((dx, vec![dk, db]))
    }
}

/// Defines `$name::<B>(..)`, which runs `$body` compiled for AVX2 when the
/// CPU has it. No FMA, so results are bit-identical on either path.
macro_rules! simd_dispatch {
    ($name:ident => $body:ident($($arg:ident: $ty:ty),*)) => {
        fn $name<const B: usize>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<const B: usize>($($arg: $ty),*) {
                    $body::<B>($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: AVX2 support was just checked.
                    return unsafe { wide::<B>($($arg),*) };
                }
            }
            $body::<B>($($arg),*)
        }
    };
}

simd_dispatch!(conv_forward => conv_forward_body(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64], out: &mut [f64]));
simd_dispatch!(conv_kernel_grad => conv_kernel_grad_body(g: &ConvGeom, x: &[f64], dy: &[f64], dk: &mut [f64]));

// The kernels below walk channels in blocks of `B` held in a local
// array, which the compiler keeps in vector registers. `B` must divide the
// blocked channel count. Padding taps are skipped since they add zero.

/// Kernel rows `[lo, hi)` that land inside the input for output index `o`.
#[inline(always)]
fn tap_range(o: usize, k: usize, n: usize, pad: usize) -> (usize, usize) {
    (pad.saturating_sub(o), k.min((n + pad).saturating_sub(o)))
}

/// `acc += sum_j xs[j] * ks[j * stride .. j * stride + B]`
#[inline(always)]
fn gather_rows<const B: usize>(acc: &mut [f64; B], xs: &[f64], ks: &[f64], stride: usize) {
    let mut j = 0;
    while j + 8 <= xs.len() {
        let x8: &[f64; 8] = xs[j..j + 8].try_into().expect("block");
        for (t, &xv) in x8.iter().enumerate() {
            let r = (j + t) * stride;
            let kr: &[f64; B] = ks[r..r + B].try_into().expect("block");
            for l in 0..B {
                acc[l] += xv * kr[l];
            }
        }
        j += 8;
    }
    for (j, &xv) in xs.iter().enumerate().skip(j) {
        let kr: &[f64; B] = ks[j * stride..j * stride + B].try_into().expect("block");
        for l in 0..B {
            acc[l] += xv * kr[l];
        }
    }
}

/// `ks[j * stride .. j * stride + B] += xs[j] * d` for every `j`
#[inline(always)]
fn scatter_rows<const B: usize>(ks: &mut [f64], xs: &[f64], d: &[f64; B], stride: usize) {
    for (j, &xv) in xs.iter().enumerate() {
        let kr: &mut [f64; B] = (&mut ks[j * stride..j * stride + B]).try_into().expect("block");
        for l in 0..B {
            kr[l] += xv * d[l];
        }
    }
}

// For one output position and kernel row, the in-bounds taps read a
// contiguous run of input values and a contiguous run of kernel rows, so
// each kernel row is a single strided dot product.

#[inline(always)]
fn conv_forward_body<const B: usize>(g: &ConvGeom, x: &[f64], k: &[f64], bias: &[f64], out: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.oh {
        let (ky0, ky1) = tap_range(oy, g.kh, g.h, g.pad_top);
        for ox in 0..g.ow {
            let (kx0, kx1) = tap_range(ox, g.kw, g.w, g.pad_left);
            if kx0 >= kx1 {
                continue;
            }
            let run = (kx1 - kx0) * cin;
            let o = (oy * g.ow + ox) * cout;
            for cb in (0..cout).step_by(B) {
                let mut acc: [f64; B] = bias[cb..cb + B].try_into().expect("block");
                for ky in ky0..ky1 {
                    let iy = oy + ky - g.pad_top;
                    let xs = &x[(iy * g.w + ox + kx0 - g.pad_left) * cin..][..run];
                    let ks = &k[(ky * g.kw + kx0) * cin * cout + cb..];
                    gather_rows(&mut acc, xs, ks, cout);
                }
                out[o + cb..o + cb + B].copy_from_slice(&acc);
            }
        }
    }
}

#[inline(always)]
fn conv_kernel_grad_body<const B: usize>(g: &ConvGeom, x: &[f64], dy: &[f64], dk: &mut [f64]) {
    let (cin, cout) = (g.cin, g.cout);
    for oy in 0..g.oh {
        let (ky0, ky1) = tap_range(oy, g.kh, g.h, g.pad_top);
        for ox in 0..g.ow {
            let (kx0, kx1) = tap_range(ox, g.kw, g.w, g.pad_left);
            if kx0 >= kx1 {
                continue;
            }
            let run = (kx1 - kx0) * cin;
            let o = (oy * g.ow + ox) * cout;
            for cb in (0..cout).step_by(B) {
                let d: [f64; B] = dy[o + cb..o + cb + B].try_into().expect("block");
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for ky in ky0..ky1 {
                    let iy = oy + ky - g.pad_top;
                    let xs = &x[(iy * g.w + ox + kx0 - g.pad_left) * cin..][..run];
                    let ks = &mut dk[(ky * g.kw + kx0) * cin * cout + cb..];
                    scatter_rows(ks, xs, &d, cout);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Max pooling

/// Max over `window`-wide patches taken every `stride` steps on each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: usize,
    pub stride: usize,
    spatial: usize,
}

impl MaxPool {
    pub fn new(window: usize, stride: usize, spatial: usize) -> Result<Self> {
        if stride == 0 || window == 0 {
            return Err(Error::invalid("max pooling window and stride must be positive"));
        }
        Ok(Self { window, stride, spatial })
    }

    fn pooled(&self, n: usize) -> usize {
        if n < self.window {
            0
        } else {
            (n - self.window) / self.stride + 1
        }
    }

    fn dims(&self, in_shape: &[usize]) -> Result<(usize, usize, usize)> {
        match (self.spatial, in_shape) {
            (1, &[l, c]) => Ok((1, l, c)),
            (2, &[h, w, c]) => Ok((h, w, c)),
            _ => Err(Error::shape(
                format!("maxpool{}d input rank", self.spatial),
                &vec![0; self.spatial + 1],
                in_shape,
            )),
        }
    }

    fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        let (h, w, c) = self.dims(in_shape)?;
        Ok(if self.spatial == 1 {
            vec![self.pooled(w), c]
        } else {
            vec![self.pooled(h), self.pooled(w), c]
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        let (h, w, c) = self.dims(x.shape())?;
        let (oh, ow) = if self.spatial == 1 {
            (1, self.pooled(w))
        } else {
            (self.pooled(h), self.pooled(w))
        };
        let wy = if self.spatial == 1 { 1 } else { self.window };
        let data = x.data();
        let mut out = Vec::with_capacity(oh * ow * c);
        let mut argmax = Vec::with_capacity(oh * ow * c);
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for ky in 0..wy {
                        let iy = oy * self.stride * usize::from(self.spatial == 2) + ky;
                        for kx in 0..self.window {
                            let ix = ox * self.stride + kx;
                            let idx = (iy * w + ix) * c + ch;
                            if best.0 == usize::MAX || data[idx] > best.1 {
                                best = (idx, data[idx]);
                            }
                        }
                    }
                    argmax.push(best.0);
                    out.push(best.1);
                }
            }
        }
        let out = Tensor::new(&self.output_shape(x.shape())?, out)?;
        Ok((
            out,
            Cache::MaxPool {
                argmax,
                in_shape: x.shape().to_vec(),
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Dense

/// Affine map `y = x W + b`, `W: [D, U]`. Inputs of any shape are read flat.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Parameter,
    pub bias: Parameter,
}

impl Dense {
    pub fn new(weights: Parameter, bias: Parameter) -> Result<Self> {
        let ws = weights.shape();
        if ws.len() != 2 {
            return Err(Error::shape("dense weights rank", &[0, 0], ws));
        }
        if bias.shape() != [ws[1]] {
            return Err(Error::shape("dense bias", &[ws[1]], bias.shape()));
        }
        Ok(Self { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Cache)> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("dense input", &[self.in_dim()], x.shape()));
        }
        let mut out = self.bias.data().to_vec();
        gemm(1, self.in_dim(), self.units(), x.data(), (self.in_dim(), 1), self.weights.data(), (self.units(), 1), 1.0, &mut out);
        Ok((
            Tensor::from_vec(out),
            Cache::Dense {
                input: x.data().to_vec(),
            },
        ))
    }

    fn backward(&self, input: &[f64], grad: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        let (d, u) = (self.in_dim(), self.units());
        if grad.len() != u {
            return Err(Error::shape("dense gradient", &[u], grad.shape()));
        }
        let g = grad.data();
        let mut dw = vec![0.0; d * u];
        for (row, &xi) in dw.chunks_exact_mut(u).zip(input) {
            for (w, gj) in row.iter_mut().zip(g) {
                *w = xi * gj;
            }
        }
        let dx = if need_input {
            let mut dx = vec![0.0; d];
            gemm(d, u, 1, self.weights.data(), (u, 1), g, (1, 1), 0.0, &mut dx);
            Some(Tensor::from_vec(dx))
        } else {
            None
        };
        Ok((dx, vec![dw, g.to_vec()]))
    }
}

// ---------------------------------------------------------------------------
// Elementwise layers

pub fn relu(x: &Tensor) -> (Tensor, Cache) {
    let active: Vec<bool> = x.data().iter().map(|&v| v > 0.0).collect();
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    (
        Tensor::new(x.shape(), data).expect("same shape"),
        Cache::Relu { active },
    )
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Eval mode is the identity.
pub fn dropout(x: &Tensor, rate: f64, mode: Mode, seed: u64) -> Result<(Tensor, Cache)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("dropout rate {rate} must be in [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), Cache::Dropout { scale: None }));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut rng: ChaCha8Rng = seed::rng(seed);
    let scale: Vec<f64> = (0..x.len())
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let data = x.data().iter().zip(&scale).map(|(v, s)| v * s).collect();
    Ok((Tensor::new(x.shape(), data)?, Cache::Dropout { scale: Some(scale) }))
}

// ---------------------------------------------------------------------------
// Layer dispatch

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl Layer {
    /// Instantiates a layer for a given input shape. Weights are Glorot-uniform,
    /// biases zero.
    pub fn from_spec(spec: &LayerSpec, in_shape: &[usize], rng: &mut ChaCha8Rng, name: &str) -> Result<Self> {
        let channels_in = || {
            in_shape
                .last()
                .copied()
                .ok_or_else(|| Error::InvalidArchitecture(format!("{name}: empty input shape")))
        };
        Ok(match *spec {
            LayerSpec::Conv1d { channels, kernel, padding } => {
                let cin = channels_in()?;
                check_positive(name, &[channels, kernel])?;
                let k = glorot(rng, &[kernel, cin, channels], kernel * cin, kernel * channels);
                Layer::Conv(Conv::conv1d(
                    Parameter::new(format!("{name}.kernel"), k),
                    Parameter::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
                    padding,
                )?)
            }
            LayerSpec::Conv2d { channels, kernel: [kh, kw], padding } => {
                let cin = channels_in()?;
                check_positive(name, &[channels, kh, kw])?;
                let k = glorot(rng, &[kh, kw, cin, channels], kh * kw * cin, kh * kw * channels);
                Layer::Conv(Conv::conv2d(
                    Parameter::new(format!("{name}.kernel"), k),
                    Parameter::new(format!("{name}.bias"), Tensor::zeros(&[channels])),
                    padding,
                )?)
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(&rate) {
                    return Err(Error::invalid(format!("{name}: dropout rate {rate} must be in [0, 1)")));
                }
                Layer::Dropout { rate }
            }
            LayerSpec::Maxpool1d { window, stride } => Layer::MaxPool(MaxPool::new(window, stride, 1)?),
            LayerSpec::Maxpool2d { window, stride } => Layer::MaxPool(MaxPool::new(window, stride, 2)?),
            LayerSpec::Dense { units } => {
                check_positive(name, &[units])?;
                let d: usize = in_shape.iter().product();
                let w = glorot(rng, &[d, units], d, units);
                Layer::Dense(Dense::new(
                    Parameter::new(format!("{name}.weights"), w),
                    Parameter::new(format!("{name}.bias"), Tensor::zeros(&[units])),
                )?)
            }
            LayerSpec::Flatten => Layer::Flatten,
        })
    }

    pub fn output_shape(&self, in_shape: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Conv(c) => c.output_shape(in_shape),
            Layer::MaxPool(p) => p.output_shape(in_shape),
            Layer::Dense(d) => {
                let n: usize = in_shape.iter().product();
                if n != d.in_dim() {
                    return Err(Error::shape("dense input", &[d.in_dim()], in_shape));
                }
                Ok(vec![d.units()])
            }
            Layer::Flatten => Ok(vec![in_shape.iter().product()]),
            Layer::Relu | Layer::Dropout { .. } => Ok(in_shape.to_vec()),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        match self {
            Layer::Conv(c) => vec![&c.kernel, &c.bias],
            Layer::Dense(d) => vec![&d.weights, &d.bias],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Conv(c) => vec![&mut c.kernel, &mut c.bias],
            Layer::Dense(d) => vec![&mut d.weights, &mut d.bias],
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx, index: usize) -> Result<(Tensor, Cache)> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::Relu => Ok(relu(x)),
            Layer::Dropout { rate } => dropout(x, *rate, ctx.mode, seed::derive(ctx.seed, &[index as u64])),
            Layer::MaxPool(p) => p.forward(x),
            Layer::Dense(d) => d.forward(x),
            Layer::Flatten => Ok((
                x.clone().reshape(&[x.len()])?,
                Cache::Flatten {
                    in_shape: x.shape().to_vec(),
                },
            )),
        }
    }

    /// Returns the input gradient (when requested) and one gradient per
    /// parameter, in [`Layer::parameters`] order.
    pub fn backward(&self, cache: &Cache, grad: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        match (self, cache) {
            (Layer::Conv(c), Cache::Conv { input }) => c.backward(input, grad, need_input),
            (Layer::Dense(d), Cache::Dense { input }) => d.backward(input, grad, need_input),
            (Layer::Relu, Cache::Relu { active }) => {
                let data = grad
                    .data()
                    .iter()
                    .zip(active)
                    .map(|(g, &a)| if a { *g } else { 0.0 })
                    .collect();
                Ok((Some(Tensor::new(grad.shape(), data)?), Vec::new()))
            }
            (Layer::Dropout { .. }, Cache::Dropout { scale }) => {
                let dx = match scale {
                    None => grad.clone(),
                    Some(s) => Tensor::new(grad.shape(), grad.data().iter().zip(s).map(|(g, s)| g * s).collect())?,
                };
                Ok((Some(dx), Vec::new()))
            }
            (Layer::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                if grad.len() != argmax.len() {
                    return Err(Error::shape("maxpool gradient", &[argmax.len()], grad.shape()));
                }
                let mut dx = Tensor::zeros(in_shape);
                let d = dx.data_mut();
                for (&i, g) in argmax.iter().zip(grad.data()) {
                    d[i] += g;
                }
                Ok((Some(dx), Vec::new()))
            }
            (Layer::Flatten, Cache::Flatten { in_shape }) => Ok((Some(grad.clone().reshape(in_shape)?), Vec::new())),
            _ => Err(Error::State("layer/cache mismatch in backward pass".into())),
        }
    }
}

fn check_positive(name: &str, values: &[usize]) -> Result<()> {
    if values.contains(&0) {
        return Err(Error::InvalidArchitecture(format!("{name}: zero-sized hyperparameter")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stack

/// A sequential chain of layers with a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    name: String,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    layers: Vec<Layer>,
}

impl Stack {
    /// Builds layers in order, propagating shapes. Any layer whose output has a
    /// zero-sized dimension is rejected as an invalid architecture.
    pub fn build(name: &str, specs: &[LayerSpec], input_shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let layer = Layer::from_spec(spec, &shape, rng, &format!("{name}.{i}"))?;
            let next = layer.output_shape(&shape).map_err(|e| match e {
                Error::Shape { .. } => Error::InvalidArchitecture(format!("{name}.{i}: {e}")),
                other => other,
            })?;
            if next.contains(&0) {
                return Err(Error::InvalidArchitecture(format!(
                    "{name}.{i} ({spec:?}) maps {shape:?} to {next:?}"
                )));
            }
            shape = next;
            layers.push(layer);
        }
        Ok(Self {
            name: name.to_owned(),
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
        })
    }

    pub fn from_layers(name: &str, layers: Vec<Layer>, input_shape: &[usize]) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for l in &layers {
            shape = l.output_shape(&shape)?;
        }
        Ok(Self {
            name: name.to_owned(),
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(Layer::parameters).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(Layer::parameters_mut).collect()
    }

    pub fn forward(&self, x: &Tensor, ctx: &ForwardCtx) -> Result<(Tensor, Vec<Cache>)> {
        x.expect_shape(&format!("{} input", self.name), &self.input_shape)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, cache) = layer.forward(&current, ctx, i)?;
            out.check_finite(&format!("{}.{i} output", self.name))?;
            caches.push(cache);
            current = out;
        }
        Ok((current, caches))
    }

    /// Parameter gradients come back in [`Stack::parameters`] order.
    pub fn backward(&self, caches: &[Cache], grad: &Tensor, need_input: bool) -> Result<(Option<Tensor>, Vec<Vec<f64>>)> {
        if caches.len() != self.layers.len() {
            return Err(Error::State(format!("{}: cache count mismatch", self.name)));
        }
        let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut current = grad.clone();
        let mut input_grad = None;
        for (i, (layer, cache)) in self.layers.iter().zip(caches).enumerate().rev() {
            let want = i > 0 || need_input;
            let (dx, grads) = layer.backward(cache, &current, want)?;
            per_layer.push(grads);
            match dx {
                Some(dx) if i > 0 => current = dx,
                dx => input_grad = dx,
            }
        }
        per_layer.reverse();
        Ok((input_grad, per_layer.into_iter().flatten().collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(name: &str, shape: &[usize], data: Vec<f64>) -> Parameter {
        Parameter::new(name, Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn conv1d_identity_kernel() {
        let x = Tensor::new(&[4, 1], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let c = Conv::conv1d(param("k", &[1, 1, 1], vec![1.0]), param("b", &[1], vec![0.0]), Padding::Same).unwrap();
        assert_eq!(c.forward(&x).unwrap().0, x);
    }

    #[test]
    fn conv1d_valid_pairs() {
        let x = Tensor::new(&[4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = Conv::conv1d(param("k", &[2, 1, 1], vec![1.0, 1.0]), param("b", &[1], vec![0.0]), Padding::Valid).unwrap();
        assert_eq!(c.forward(&x).unwrap().0.data(), &[3.0, 5.0, 7.0]);
    }

    #[test]
    fn conv1d_same_keeps_length() {
        let c = Conv::conv1d(param("k", &[5, 1, 2], vec![0.1; 10]), param("b", &[2], vec![0.0; 2]), Padding::Same).unwrap();
        assert_eq!(c.output_shape(&[177, 1]).unwrap(), vec![177, 2]);
        let even = Conv::conv1d(param("k", &[4, 1, 1], vec![1.0; 4]), param("b", &[1], vec![0.0]), Padding::Same).unwrap();
        // left pad 1, right pad 2: [0 1 2 3 0 0]
        let x = Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(even.forward(&x).unwrap().0.data(), &[6.0, 6.0, 5.0]);
    }

    #[test]
    fn conv2d_sum_and_identity() {
        let ones = Conv::conv2d(param("k", &[3, 3, 1, 1], vec![1.0; 9]), param("b", &[1], vec![0.0]), Padding::Valid).unwrap();
        let x = Tensor::new(&[3, 3, 1], vec![1.0; 9]).unwrap();
        assert_eq!(ones.forward(&x).unwrap().0.data(), &[9.0]);

        let eye = Conv::conv2d(
            param("k", &[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]),
            param("b", &[2], vec![0.0; 2]),
            Padding::Same,
        )
        .unwrap();
        let x = Tensor::new(&[2, 2, 2], (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(eye.forward(&x).unwrap().0, x);
    }

    #[test]
    fn conv_shape_errors() {
        let c = Conv::conv2d(param("k", &[3, 3, 2, 1], vec![0.0; 18]), param("b", &[1], vec![0.0]), Padding::Valid).unwrap();
        let err = c.forward(&Tensor::zeros(&[4, 4, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
        assert!(c.forward(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let p = MaxPool::new(2, 2, 1).unwrap();
        let x = Tensor::new(&[4, 1], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().0.data(), &[5.0, 3.0]);
        let p8 = MaxPool::new(8, 8, 1).unwrap();
        assert_eq!(p8.output_shape(&[169, 4]).unwrap(), vec![21, 4]);
        assert_eq!(p8.output_shape(&[177, 4]).unwrap(), vec![22, 4]);
        let p2 = MaxPool::new(8, 8, 2).unwrap();
        assert_eq!(p2.output_shape(&[224, 224, 3]).unwrap(), vec![28, 28, 3]);
        assert_eq!(p2.output_shape(&[28, 28, 3]).unwrap(), vec![3, 3, 3]);
        assert!(MaxPool::new(8, 0, 1).is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_first_argmax() {
        let layer = Layer::MaxPool(MaxPool::new(2, 2, 1).unwrap());
        let x = Tensor::new(&[4, 1], vec![2.0, 2.0, 1.0, 3.0]).unwrap();
        let (_, cache) = layer.forward(&x, &ForwardCtx::eval(), 0).unwrap();
        let (dx, _) = layer.backward(&cache, &Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap(), true).unwrap();
        assert_eq!(dx.unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_definition() {
        let (y, cache) = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let (dx, _) = Layer::Relu.backward(&cache, &Tensor::from_vec(vec![1.0; 3]), true).unwrap();
        assert_eq!(dx.unwrap().data(), &[0.0, 0.0, 1.0]);
        let (y, _) = relu(&Tensor::from_vec(vec![-3.0, -0.5]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dropout_modes() {
        let x = Tensor::from_vec((0..100).map(f64::from).collect());
        assert_eq!(dropout(&x, 0.5, Mode::Eval, 1).unwrap().0, x);
        assert_eq!(dropout(&x, 0.0, Mode::Train, 1).unwrap().0, x);
        assert!(dropout(&x, 1.0, Mode::Train, 1).is_err());
        assert_eq!(dropout(&x, 0.3, Mode::Train, 4).unwrap().0, dropout(&x, 0.3, Mode::Train, 4).unwrap().0);
    }

    #[test]
    fn dropout_statistics() {
        let x = Tensor::from_vec(vec![1.0; 100_000]);
        let (y, _) = dropout(&x, 0.1, Mode::Train, 2024).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.1).abs() <= 0.01, "{frac}");
        assert!(y.data().iter().all(|&v| v == 0.0 || (v - 10.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn dense_hand_arithmetic() {
        // W is 2x3 so that y = x W = [x0, x1, x0 + x1]
        let d = Dense::new(
            param("w", &[2, 3], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]),
            param("b", &[3], vec![0.0; 3]),
        )
        .unwrap();
        assert_eq!(d.forward(&Tensor::from_vec(vec![1.0, 2.0])).unwrap().0.data(), &[1.0, 2.0, 3.0]);

        let eye = Dense::new(param("w", &[2, 2], vec![1.0, 0.0, 0.0, 1.0]), param("b", &[2], vec![0.0; 2])).unwrap();
        assert_eq!(eye.forward(&Tensor::from_vec(vec![4.0, -5.0])).unwrap().0.data(), &[4.0, -5.0]);
        assert!(eye.forward(&Tensor::from_vec(vec![1.0; 3])).is_err());
    }

    #[test]
    fn stack_rejects_collapsing_pool() {
        let mut rng = seed::rng(0);
        let specs = [LayerSpec::Maxpool2d { window: 8, stride: 8 }, LayerSpec::Maxpool2d { window: 8, stride: 8 }];
        assert!(matches!(
            Stack::build("s", &specs, &[32, 32, 1], &mut rng),
            Err(Error::InvalidArchitecture(_))
        ));
    }
}
