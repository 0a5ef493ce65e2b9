//! The nine-layer ConvLSTM autoencoder: an input layer, ConvLSTM blocks
//! alternating with batch normalization, and a sigmoid output head.

pub mod checkpoint;
pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, convlstm_layer_backward, convlstm_layer_forward, output_head_backward,
    output_head_forward, BatchNormCache, BatchNormParams, ConvLstmGrads, ConvLstmParams, ConvLstmState, HeadCache,
    HeadParams, LayerCache, Mode,
};
use crate::tensor::{leaky_relu, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainingMeta};
pub use train::{fit, predict, train_step, training_pair, EpochSummary, TrainOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub filters: usize,
    pub kernel_size: usize,
}

/// How the 18 encoder timesteps map onto 18 future frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InferenceMode {
    /// Output at input step `t` is the forecast of frame `t + input_frames`.
    DirectMapped,
    /// Output at step `t` is the next frame; forecasts are rolled out by
    /// feeding predictions back as input.
    Autoregressive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub input_frames: usize,
    pub output_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub blocks: Vec<BlockConfig>,
    pub leaky_relu_alpha: f64,
    /// Insert a LeakyReLU after every batch normalization layer.
    pub leaky_relu_after_batchnorm: bool,
    pub head_kernel_size: usize,
    pub inference_mode: InferenceMode,
    pub peephole: bool,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    /// Require exactly four ConvLSTM blocks (the nine-layer layout).
    pub strict_arch: bool,
}

pub const FULL_SCALE_FRAME_H: usize = 344;
pub const FULL_SCALE_FRAME_W: usize = 315;
pub const DEFAULT_SEQUENCE_FRAMES: usize = 18;
pub const STRICT_BLOCK_COUNT: usize = 4;

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let block = |filters, kernel_size| BlockConfig { filters, kernel_size };
        ArchitectureConfig {
            input_frames: DEFAULT_SEQUENCE_FRAMES,
            output_frames: DEFAULT_SEQUENCE_FRAMES,
            frame_h: FULL_SCALE_FRAME_H,
            frame_w: FULL_SCALE_FRAME_W,
            blocks: vec![block(64, 5), block(64, 3), block(64, 3), block(64, 1)],
            leaky_relu_alpha: crate::layers::DEFAULT_LEAKY_RELU_ALPHA,
            leaky_relu_after_batchnorm: true,
            head_kernel_size: 3,
            inference_mode: InferenceMode::DirectMapped,
            peephole: false,
            bn_epsilon: crate::layers::batchnorm::DEFAULT_EPSILON,
            bn_momentum: crate::layers::batchnorm::DEFAULT_MOMENTUM,
            strict_arch: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    ConvLstm,
    BatchNorm,
    OutputHead,
}

impl ArchitectureConfig {
    /// A 16×16, two-block configuration that trains in seconds.
    pub fn desk_scale() -> Self {
        ArchitectureConfig {
            input_frames: 6,
            output_frames: 6,
            frame_h: 16,
            frame_w: 16,
            blocks: vec![
                BlockConfig {
                    filters: 8,
                    kernel_size: 5,
                },
                BlockConfig {
                    filters: 8,
                    kernel_size: 3,
                },
            ],
            strict_arch: false,
            // Running statistics must settle within a few hundred steps.
            bn_momentum: 0.9,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.blocks.is_empty() {
            return bad("at least one ConvLSTM block is required".into());
        }
        if self.strict_arch && self.blocks.len() != STRICT_BLOCK_COUNT {
            return bad(format!(
                "strict architecture needs {STRICT_BLOCK_COUNT} ConvLSTM blocks (nine layers), got {}",
                self.blocks.len()
            ));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.filters == 0 || b.kernel_size % 2 == 0 {
                return bad(format!("block {i}: filters must be >= 1 and kernel_size odd"));
            }
        }
        if self.head_kernel_size.is_multiple_of(2) {
            return bad("head_kernel_size must be odd".into());
        }
        if self.input_frames == 0 || self.output_frames == 0 || self.frame_h == 0 || self.frame_w == 0 {
            return bad("frame counts and frame dimensions must be >= 1".into());
        }
        if self.inference_mode == InferenceMode::DirectMapped && self.input_frames != self.output_frames {
            return bad("DirectMapped needs input_frames == output_frames".into());
        }
        if !(self.leaky_relu_alpha >= 0.0 && self.leaky_relu_alpha.is_finite()) {
            return bad("leaky_relu_alpha must be finite and >= 0".into());
        }
        if !(self.bn_epsilon > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return bad("bn_epsilon must be > 0 and bn_momentum in (0, 1)".into());
        }
        Ok(())
    }

    /// Input layer, ConvLSTM blocks with batch normalization between
    /// consecutive blocks, then the output head.
    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = vec![LayerKind::Input];
        for i in 0..self.blocks.len() {
            if i > 0 {
                kinds.push(LayerKind::BatchNorm);
            }
            kinds.push(LayerKind::ConvLstm);
        }
        kinds.push(LayerKind::OutputHead);
        kinds
    }

    pub fn layer_count(&self) -> usize {
        self.layer_kinds().len()
    }

    /// Number of frames fed to the stack during training.
    pub fn training_steps(&self) -> usize {
        match self.inference_mode {
            InferenceMode::DirectMapped => self.input_frames,
            InferenceMode::Autoregressive => self.input_frames + self.output_frames - 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage<T = f32> {
    ConvLstm(ConvLstmParams<T>),
    BatchNorm(BatchNormParams<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub arch: ArchitectureConfig,
    pub stages: Vec<Stage<T>>,
    pub head: HeadParams<T>,
}

/// Deterministically initializes every layer from `seed`.
pub fn build_model<T: Scalar>(arch: &ArchitectureConfig, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peep = arch.peephole.then_some((arch.frame_h, arch.frame_w));
    let mut stages = Vec::with_capacity(2 * arch.blocks.len());
    let mut channels = 1;
    for (i, b) in arch.blocks.iter().enumerate() {
        if i > 0 {
            stages.push(Stage::BatchNorm(BatchNormParams::new(
                channels,
                arch.bn_epsilon,
                arch.bn_momentum,
            )?));
        }
        stages.push(Stage::ConvLstm(ConvLstmParams::init(
            channels,
            b.filters,
            b.kernel_size,
            peep,
            &mut rng,
        )?));
        channels = b.filters;
    }
    let head = HeadParams::init(channels, arch.head_kernel_size, &mut rng)?;
    Ok(ModelParams {
        arch: arch.clone(),
        stages,
        head,
    })
}

/// Gradients shaped like the trainable tensors of [`ModelParams`].
#[derive(Debug, Clone)]
pub enum StageGrads<T> {
    ConvLstm(ConvLstmGrads<T>),
    BatchNorm { gamma: Tensor<T>, beta: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct ModelGrads<T> {
    pub stages: Vec<StageGrads<T>>,
    pub head_kernels: Tensor<T>,
    pub head_bias: Tensor<T>,
}

impl<T: Scalar> ModelGrads<T> {
    /// Same names and order as [`ModelParams::trainable`].
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            match s {
                StageGrads::ConvLstm(g) => {
                    out.push((format!("stage{i}.input_kernels"), &g.input_kernels));
                    out.push((format!("stage{i}.recurrent_kernels"), &g.recurrent_kernels));
                    out.push((format!("stage{i}.bias"), &g.bias));
                    if let Some(p) = &g.peephole {
                        out.push((format!("stage{i}.peephole"), p));
                    }
                }
                StageGrads::BatchNorm { gamma, beta } => {
                    out.push((format!("stage{i}.gamma"), gamma));
                    out.push((format!("stage{i}.beta"), beta));
                }
            }
        }
        out.push(("head.kernels".into(), &self.head_kernels));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }
}

/// Whether a named tensor is optimized or only carried along (running
/// statistics).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Trainable,
    Buffer,
}

macro_rules! named_tensors {
    ($self:ident, $iter:ident, $($ref:tt)+) => {{
        let mut out = Vec::new();
        for (i, s) in $self.stages.$iter().enumerate() {
            match s {
                Stage::ConvLstm(p) => {
                    out.push((format!("stage{i}.input_kernels"), $($ref)+ p.input_kernels, TensorRole::Trainable));
                    out.push((format!("stage{i}.recurrent_kernels"), $($ref)+ p.recurrent_kernels, TensorRole::Trainable));
                    out.push((format!("stage{i}.bias"), $($ref)+ p.bias, TensorRole::Trainable));
                    if let Some(pp) = $($ref)+ p.peephole {
                        out.push((format!("stage{i}.peephole"), pp, TensorRole::Trainable));
                    }
                }
                Stage::BatchNorm(p) => {
                    out.push((format!("stage{i}.gamma"), $($ref)+ p.gamma, TensorRole::Trainable));
                    out.push((format!("stage{i}.beta"), $($ref)+ p.beta, TensorRole::Trainable));
                    out.push((format!("stage{i}.running_mean"), $($ref)+ p.running_mean, TensorRole::Buffer));
                    out.push((format!("stage{i}.running_var"), $($ref)+ p.running_var, TensorRole::Buffer));
                }
            }
        }
        out.push(("head.kernels".to_string(), $($ref)+ $self.head.kernels, TensorRole::Trainable));
        out.push(("head.bias".to_string(), $($ref)+ $self.head.bias, TensorRole::Trainable));
        out
    }};
}

impl<T: Scalar> ModelParams<T> {
    /// Every tensor, trainable or buffer, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>, TensorRole)> {
        named_tensors!(self, iter, &)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>, TensorRole)> {
        named_tensors!(self, iter_mut, &mut)
    }

    pub fn trainable(&self) -> Vec<(String, &Tensor<T>)> {
        self.tensors()
            .into_iter()
            .filter(|(_, _, r)| *r == TensorRole::Trainable)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, _, r)| *r == TensorRole::Trainable)
            .map(|(n, t, _)| (n, t))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        let mut kinds = vec![LayerKind::Input];
        kinds.extend(self.stages.iter().map(|s| match s {
            Stage::ConvLstm(_) => LayerKind::ConvLstm,
            Stage::BatchNorm(_) => LayerKind::BatchNorm,
        }));
        kinds.push(LayerKind::OutputHead);
        kinds
    }

    /// Checks shapes against the architecture and that every value is
    /// finite.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.layer_kinds() != self.arch.layer_kinds() {
            return Err(Error::InvalidConfig("stages do not match the architecture".into()));
        }
        let mut channels = 1;
        let mut blocks = self.arch.blocks.iter();
        for s in &self.stages {
            match s {
                Stage::ConvLstm(p) => {
                    let b = blocks.next().expect("layer kinds checked");
                    p.validate()?;
                    if p.in_channels() != channels || p.filters() != b.filters || p.kernel_size() != b.kernel_size {
                        return Err(Error::InvalidConfig(
                            "ConvLSTM geometry does not match the architecture".into(),
                        ));
                    }
                    if p.peephole.is_some() != self.arch.peephole {
                        return Err(Error::InvalidConfig(
                            "peephole setting does not match the architecture".into(),
                        ));
                    }
                    channels = p.filters();
                }
                Stage::BatchNorm(p) => {
                    p.validate()?;
                    if p.channels() != channels {
                        return Err(Error::dim("model", "batchnorm channels", channels, p.channels()));
                    }
                }
            }
        }
        self.head.validate()?;
        if self.head.spec().in_channels() != channels {
            return Err(Error::dim(
                "model",
                "head channels",
                channels,
                self.head.spec().in_channels(),
            ));
        }
        for (name, t, _) in self.tensors() {
            if !t.all_finite() {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            arch: self.arch.clone(),
            stages: self
                .stages
                .iter()
                .map(|s| match s {
                    Stage::ConvLstm(p) => Stage::ConvLstm(p.cast()),
                    Stage::BatchNorm(p) => Stage::BatchNorm(p.cast()),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>, op: &str) -> Result<()> {
        if x.rank() != 5 {
            return Err(Error::dim(op, "input rank", 5, x.rank()));
        }
        let s = x.shape();
        if s[2] != 1 {
            return Err(Error::dim(op, "input channels", 1, s[2]));
        }
        if s[3] != self.arch.frame_h {
            return Err(Error::dim(op, "frame height", self.arch.frame_h, s[3]));
        }
        if s[4] != self.arch.frame_w {
            return Err(Error::dim(op, "frame width", self.arch.frame_w, s[4]));
        }
        if let Some(v) = x.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
            return Err(Error::OutOfRange(format!(
                "{op}: input value {v} is not normalized to [0, 1]"
            )));
        }
        Ok(())
    }

    /// Runs the stack over `x` (`[N, T, 1, h, w]`) and emits one frame per
    /// timestep. The sequence length must equal the architecture's training
    /// length ([`ArchitectureConfig::training_steps`]).
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x, "forward")?;
        let steps = self.arch.training_steps();
        if x.shape()[1] != steps {
            return Err(Error::dim("forward", "frame count", steps, x.shape()[1]));
        }
        let (y, cache, _) = self.run_stack(x, mode, None)?;
        Ok((y, cache))
    }

    /// Forward pass without the frame-count check. `states` seeds each
    /// ConvLSTM stage; the final states are returned in stage order.
    pub(crate) fn run_stack(
        &self,
        x: &Tensor<T>,
        mode: Mode,
        states: Option<&[ConvLstmState<T>]>,
    ) -> Result<StackOutput<T>> {
        let keep = mode == Mode::Train;
        let alpha = T::lit(self.arch.leaky_relu_alpha);
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut finals = Vec::new();
        let mut act = x.clone();
        for s in &self.stages {
            match s {
                Stage::ConvLstm(p) => {
                    let init = states.map(|st| &st[finals.len()]);
                    let (h, fin, cache) = convlstm_layer_forward(&act, p, init)?;
                    finals.push(fin);
                    if keep {
                        caches.push(StageCache::ConvLstm(cache));
                    }
                    act = h;
                }
                Stage::BatchNorm(p) => {
                    let (y, bn) = batchnorm_forward(&act, p, mode)?;
                    let (y, pre) = if self.arch.leaky_relu_after_batchnorm {
                        (y.map(|v| leaky_relu(v, alpha)), Some(y))
                    } else {
                        (y, None)
                    };
                    if keep {
                        caches.push(StageCache::BatchNorm {
                            bn,
                            pre_activation: pre,
                        });
                    }
                    act = y;
                }
            }
        }
        let (y, head) = output_head_forward(&act, &self.head)?;
        Ok((
            y,
            ForwardCache {
                mode,
                stages: caches,
                head: keep.then_some(head),
            },
            finals,
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the head output) through the
    /// whole time-unrolled stack.
    pub fn backward(&self, cache: &ForwardCache<T>, d_out: &Tensor<T>) -> Result<ModelGrads<T>> {
        let head_cache = match (&cache.mode, &cache.head) {
            (Mode::Train, Some(h)) => h,
            _ => return Err(Error::Backward("forward pass ran in Infer mode".into())),
        };
        if cache.stages.len() != self.stages.len() {
            return Err(Error::Backward("cache does not match the model's stages".into()));
        }
        let hg = output_head_backward(head_cache, &self.head, d_out)?;
        let alpha = T::lit(self.arch.leaky_relu_alpha);
        let mut grad = hg.d_hidden;
        let mut stage_grads = Vec::with_capacity(self.stages.len());
        for (s, c) in self.stages.iter().zip(&cache.stages).rev() {
            match (s, c) {
                (Stage::ConvLstm(p), StageCache::ConvLstm(lc)) => {
                    let g = convlstm_layer_backward(lc, p, &grad, None)?;
                    stage_grads.push(StageGrads::ConvLstm(g.params));
                    grad = g.d_seq;
                }
                (Stage::BatchNorm(_), StageCache::BatchNorm { bn, pre_activation }) => {
                    if let Some(pre) = pre_activation {
                        grad = grad.zip_map(
                            pre,
                            "leaky_relu backward",
                            |g, z| {
                                if z >= T::zero() {
                                    g
                                } else {
                                    g * alpha
                                }
                            },
                        )?;
                    }
                    let g = batchnorm_backward(bn, &grad)?;
                    stage_grads.push(StageGrads::BatchNorm {
                        gamma: g.dgamma,
                        beta: g.dbeta,
                    });
                    grad = g.dx;
                }
                _ => return Err(Error::Backward("cache stage kinds do not match the model".into())),
            }
        }
        stage_grads.reverse();
        Ok(ModelGrads {
            stages: stage_grads,
            head_kernels: hg.kernels,
            head_bias: hg.bias,
        })
    }

    /// Folds the batch statistics recorded in a Train-mode cache into each
    /// batch normalization layer's running estimates.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        for (s, c) in self.stages.iter_mut().zip(&cache.stages) {
            if let (Stage::BatchNorm(p), StageCache::BatchNorm { bn, .. }) = (s, c) {
                p.update_running(bn);
            }
        }
    }
}

#[derive(Debug, Clone)]
enum StageCache<T> {
    ConvLstm(LayerCache<T>),
    BatchNorm {
        bn: BatchNormCache<T>,
        pre_activation: Option<Tensor<T>>,
    },
}

/// Output, cache and final per-stage states of one pass through the stack.
pub(crate) type StackOutput<T> = (Tensor<T>, ForwardCache<T>, Vec<ConvLstmState<T>>);

/// Intermediates of a full forward pass. Infer-mode passes keep nothing and
/// cannot be backpropagated.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    stages: Vec<StageCache<T>>,
    head: Option<HeadCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}
