//! The two-stream network: a spectrogram CNN, an MFCC CNN, feature-level
//! fusion by concatenation and a dense softmax head.
//!
//! Spectrogram stream, repeated twice:
//! `conv3x3 -> relu -> conv3x3 -> relu -> dropout -> maxpool -> conv3x3 -> relu`,
//! then flatten. MFCC stream:
//! `conv5 -> relu -> conv5 -> relu -> dropout -> maxpool -> flatten`.
//! All convolutions use `width` channels and same padding. With the default
//! inputs (224x224x3, 177x1), pool 8 and width 128 the streams flatten to
//! 1152 and 2816 values, and the head sees 3968.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::mfcc::MfccInput;
use crate::nn::{
    concat, softmax_cross_entropy, split_grad, Differentiable, ForwardCtx, LayerSpec, Mode, Padding, Parameter,
    Stack, Tensor,
};
use crate::seed;
use crate::spectro::{SpectroImage, CHANNELS, IMAGE_SIDE};

pub const PAPER_WIDTH: usize = 128;
pub const PAPER_POOL: usize = 8;
pub const DROPOUT_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "dep-bin")]
    DepressionBinary,
    #[serde(rename = "dep-sev")]
    DepressionSeverity,
    #[serde(rename = "arousal")]
    Arousal,
    #[serde(rename = "valence")]
    Valence,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::DepressionBinary,
        TaskKind::DepressionSeverity,
        TaskKind::Arousal,
        TaskKind::Valence,
    ];

    pub fn n_classes(self) -> usize {
        match self {
            TaskKind::DepressionBinary => 2,
            TaskKind::DepressionSeverity => 24,
            TaskKind::Arousal | TaskKind::Valence => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::DepressionBinary => "dep-bin",
            TaskKind::DepressionSeverity => "dep-sev",
            TaskKind::Arousal => "arousal",
            TaskKind::Valence => "valence",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task `{s}` (expected dep-bin, dep-sev, arousal or valence)")))
    }
}

/// Input geometry and widths of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub width: usize,
    /// `[H, W, C]` of the spectrogram image.
    pub spectro_shape: [usize; 3],
    pub mfcc_len: usize,
    /// Max-pool window and stride.
    pub pool: usize,
}

impl Architecture {
    /// 224x224x3 images, 177-d MFCC vectors, pool 8.
    pub fn standard(width: usize) -> Self {
        Self {
            width,
            spectro_shape: [IMAGE_SIDE, IMAGE_SIDE, CHANNELS],
            mfcc_len: 177,
            pool: PAPER_POOL,
        }
    }

    fn pooled(&self, n: usize) -> usize {
        n / self.pool
    }

    /// `(H/p/p) * (W/p/p) * width`
    pub fn spectro_features(&self) -> usize {
        let [h, w, _] = self.spectro_shape;
        self.pooled(self.pooled(h)) * self.pooled(self.pooled(w)) * self.width
    }

    /// `(L/p) * width`
    pub fn mfcc_features(&self) -> usize {
        self.pooled(self.mfcc_len) * self.width
    }

    pub fn fused_features(&self) -> usize {
        self.spectro_features() + self.mfcc_features()
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.pool == 0 || self.mfcc_len == 0 || self.spectro_shape.contains(&0) {
            return Err(Error::InvalidArchitecture(format!("zero-sized dimension in {self:?}")));
        }
        if self.spectro_features() == 0 || self.mfcc_features() == 0 {
            return Err(Error::InvalidArchitecture(format!(
                "pooling by {} collapses a stream to zero size ({self:?})",
                self.pool
            )));
        }
        Ok(())
    }

    fn spectro_layers(&self) -> Vec<LayerSpec> {
        let conv = LayerSpec::Conv2d {
            channels: self.width,
            kernel: [3, 3],
            padding: Padding::Same,
        };
        let block = [
            conv.clone(),
            LayerSpec::Relu,
            conv.clone(),
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: DROPOUT_RATE },
            LayerSpec::Maxpool2d {
                window: self.pool,
                stride: self.pool,
            },
            conv,
            LayerSpec::Relu,
        ];
        let mut layers: Vec<LayerSpec> = block.iter().chain(block.iter()).cloned().collect();
        layers.push(LayerSpec::Flatten);
        layers
    }

    fn mfcc_layers(&self) -> Vec<LayerSpec> {
        let conv = LayerSpec::Conv1d {
            channels: self.width,
            kernel: 5,
            padding: Padding::Same,
        };
        vec![
            conv.clone(),
            LayerSpec::Relu,
            conv,
            LayerSpec::Relu,
            LayerSpec::Dropout { rate: DROPOUT_RATE },
            LayerSpec::Maxpool1d {
                window: self.pool,
                stride: self.pool,
            },
            LayerSpec::Flatten,
        ]
    }
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Spectrogram feature extractor.
    Spectro,
    /// MFCC feature extractor.
    Mfcc,
    /// Fused dense output head.
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamFeatures {
    pub spectro: Tensor,
    pub mfcc: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbs {
    pub probs: Vec<f64>,
    pub predicted_class: usize,
}

impl ClassProbs {
    pub fn from_probs(probs: Vec<f64>) -> Self {
        let predicted_class = Tensor::from_vec(probs.clone()).argmax();
        Self { probs, predicted_class }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub probs: ClassProbs,
    pub features: StreamFeatures,
    pub logits: Tensor,
}

/// Result of one forward/backward pass on a single example.
#[derive(Debug, Clone)]
pub struct ExampleGrads {
    pub loss: f64,
    pub probs: Vec<f64>,
    /// One gradient per parameter, in [`EmoAudioNet::parameters`] order.
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmoAudioNet {
    task: TaskKind,
    arch: Architecture,
    spectro_stream: Stack,
    mfcc_stream: Stack,
    head: Stack,
}

/// Paper-configuration model (224x224x3 / 177x1 inputs, pool 8).
pub fn build_model(task: TaskKind, width: usize, seed: u64) -> Result<EmoAudioNet> {
    EmoAudioNet::new(task, Architecture::standard(width), seed)
}

impl EmoAudioNet {
    pub fn new(task: TaskKind, arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let spectro_stream = Stack::build("spectro", &arch.spectro_layers(), &arch.spectro_shape, &mut rng)?;
        let mfcc_stream = Stack::build("mfcc", &arch.mfcc_layers(), &[arch.mfcc_len, 1], &mut rng)?;
        if spectro_stream.output_shape() != [arch.spectro_features()] || mfcc_stream.output_shape() != [arch.mfcc_features()] {
            return Err(Error::InvalidArchitecture(format!(
                "stream sizes {:?}/{:?} disagree with {}/{}",
                spectro_stream.output_shape(),
                mfcc_stream.output_shape(),
                arch.spectro_features(),
                arch.mfcc_features()
            )));
        }
        let head = Stack::build(
            "head",
            &[LayerSpec::Dense {
                units: task.n_classes(),
            }],
            &[arch.fused_features()],
            &mut rng,
        )?;
        Ok(Self {
            task,
            arch,
            spectro_stream,
            mfcc_stream,
            head,
        })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn spectro_stream(&self) -> &Stack {
        &self.spectro_stream
    }

    pub fn mfcc_stream(&self) -> &Stack {
        &self.mfcc_stream
    }

    pub fn head(&self) -> &Stack {
        &self.head
    }

    /// Spectrogram stream, then MFCC stream, then head.
    pub fn parameters(&self) -> Vec<&Parameter> {
        let mut p = self.spectro_stream.parameters();
        p.extend(self.mfcc_stream.parameters());
        p.extend(self.head.parameters());
        p
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.spectro_stream.parameters_mut();
        p.extend(self.mfcc_stream.parameters_mut());
        p.extend(self.head.parameters_mut());
        p
    }

    /// Group of each parameter, aligned with [`EmoAudioNet::parameters`].
    pub fn parameter_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Spectro; self.spectro_stream.parameters().len()];
        g.extend(vec![ParamGroup::Mfcc; self.mfcc_stream.parameters().len()]);
        g.extend(vec![ParamGroup::Head; self.head.parameters().len()]);
        g
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Sets every weight and bias to zero (moments untouched).
    pub fn zero_parameters(&mut self) {
        for p in self.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Replaces parameter values and optimizer state, checking names and shapes in order.
    pub fn load_parameters(&mut self, params: Vec<Parameter>) -> Result<()> {
        let mine = self.parameters();
        if params.len() != mine.len() {
            return Err(Error::shape("parameter count", &[mine.len()], &[params.len()]));
        }
        for (have, want) in params.iter().zip(&mine) {
            if have.name != want.name {
                return Err(Error::Config(format!(
                    "parameter `{}` found where `{}` was expected",
                    have.name, want.name
                )));
            }
            if have.shape() != want.shape() {
                return Err(Error::shape(format!("parameter {}", want.name), want.shape(), have.shape()));
            }
        }
        for (slot, p) in self.parameters_mut().into_iter().zip(params) {
            *slot = p;
        }
        Ok(())
    }

    fn spectro_tensor(&self, image: &SpectroImage) -> Result<Tensor> {
        Tensor::new(&self.arch.spectro_shape, image.pixels.clone())
    }

    fn mfcc_tensor(&self, mfcc: &MfccInput) -> Result<Tensor> {
        Tensor::new(&[self.arch.mfcc_len, 1], mfcc.values.clone())
            .map_err(|_| Error::shape("mfcc input", &[self.arch.mfcc_len], &[mfcc.values.len()]))
    }

    /// Forward pass on feature containers.
    pub fn forward(&self, spectro: &SpectroImage, mfcc: &MfccInput, mode: Mode, seed: u64) -> Result<ForwardOutput> {
        let ctx = ForwardCtx { mode, seed };
        self.forward_tensors(&self.spectro_tensor(spectro)?, &self.mfcc_tensor(mfcc)?, &ctx)
    }

    /// Forward pass on raw tensors `[H, W, C]` and `[L, 1]`.
    pub fn forward_tensors(&self, spectro: &Tensor, mfcc: &Tensor, ctx: &ForwardCtx) -> Result<ForwardOutput> {
        let (spec_feat, _) = self.spectro_stream.forward(spectro, &self.stream_ctx(ctx, 0))?;
        let (mfcc_feat, _) = self.mfcc_stream.forward(mfcc, &self.stream_ctx(ctx, 1))?;
        let fused = concat(&[&mfcc_feat, &spec_feat]);
        let (logits, _) = self.head.forward(&fused, ctx)?;
        let probs = crate::nn::softmax(logits.data());
        Ok(ForwardOutput {
            probs: ClassProbs::from_probs(probs),
            features: StreamFeatures {
                spectro: spec_feat,
                mfcc: mfcc_feat,
            },
            logits,
        })
    }

    fn stream_ctx(&self, ctx: &ForwardCtx, stream: u64) -> ForwardCtx {
        ForwardCtx {
            mode: ctx.mode,
            seed: seed::derive(ctx.seed, &[stream]),
        }
    }

    /// Forward, cross-entropy and backward through both streams and the head.
    pub fn backprop(&self, spectro: &Tensor, mfcc: &Tensor, target: usize, ctx: &ForwardCtx) -> Result<ExampleGrads> {
        let (spec_feat, spec_caches) = self.spectro_stream.forward(spectro, &self.stream_ctx(ctx, 0))?;
        let (mfcc_feat, mfcc_caches) = self.mfcc_stream.forward(mfcc, &self.stream_ctx(ctx, 1))?;
        let fused = concat(&[&mfcc_feat, &spec_feat]);
        let (logits, head_caches) = self.head.forward(&fused, ctx)?;
        let ce = softmax_cross_entropy(&logits, target)?;
        if !ce.loss.is_finite() {
            return Err(Error::Numeric(format!("loss is {}", ce.loss)));
        }

        let (fused_grad, head_grads) = self.head.backward(&head_caches, &ce.grad, true)?;
        let fused_grad = fused_grad.expect("requested input gradient");
        let parts = split_grad(fused_grad.data(), &[mfcc_feat.len(), spec_feat.len()])?;
        let mut parts = parts.into_iter();
        let mfcc_grad = Tensor::from_vec(parts.next().expect("two parts"));
        let spec_grad = Tensor::from_vec(parts.next().expect("two parts"));
        let (_, spec_grads) = self.spectro_stream.backward(&spec_caches, &spec_grad, false)?;
        let (_, mfcc_grads) = self.mfcc_stream.backward(&mfcc_caches, &mfcc_grad, false)?;

        let mut grads = spec_grads;
        grads.extend(mfcc_grads);
        grads.extend(head_grads);
        Ok(ExampleGrads {
            loss: ce.loss,
            probs: ce.probs.into_data(),
            grads,
        })
    }
}

/// End-to-end eval-mode inference on one clip.
pub fn predict_label(net: &EmoAudioNet, clip: &AudioClip, task: TaskKind, extractor: &FeatureExtractor) -> Result<ClassProbs> {
    if task.n_classes() != net.task().n_classes() {
        return Err(Error::Config(format!(
            "network has {} outputs ({}), task {task} needs {}",
            net.task().n_classes(),
            net.task(),
            task.n_classes()
        )));
    }
    let (spec, mfcc) = extractor.extract(clip)?.tensors()?;
    Ok(net.forward_tensors(&spec, &mfcc, &ForwardCtx::eval())?.probs)
}

impl Differentiable for EmoAudioNet {
    type Input = (Tensor, Tensor);

    fn parameters(&self) -> Vec<&Parameter> {
        EmoAudioNet::parameters(self)
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        EmoAudioNet::parameters_mut(self)
    }

    fn eval_loss(&self, input: &Self::Input, target: usize) -> Result<f64> {
        let out = self.forward_tensors(&input.0, &input.1, &ForwardCtx::eval())?;
        Ok(softmax_cross_entropy(&out.logits, target)?.loss)
    }

    fn loss_and_grads(&self, input: &Self::Input, target: usize) -> Result<(f64, Vec<Vec<f64>>)> {
        let g = self.backprop(&input.0, &input.1, target, &ForwardCtx::eval())?;
        Ok((g.loss, g.grads))
    }
}
