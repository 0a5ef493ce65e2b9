//! Training steps, the epoch loop and prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::sequence::{stack_frames, SequenceSample};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{InferenceMode, ModelParams};
use crate::optim::{adadelta_step, bce_loss, OptimState};
use crate::tensor::{Scalar, Tensor};

/// Stacks a batch into the stack's training input and target,
/// `[N, T, 1, h, w]` each.
///
/// DirectMapped pairs the input frames with the target frames.
/// Autoregressive concatenates both and trains next-frame prediction, so
/// input and target are the concatenation without its last and first frame.
pub fn training_pair<T: Scalar>(params: &ModelParams<T>, batch: &[SequenceSample]) -> Result<(Tensor<T>, Tensor<T>)> {
    let arch = &params.arch;
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty training batch".into()));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in batch {
        if s.inputs.len() != arch.input_frames || s.targets.len() != arch.output_frames {
            return Err(Error::Sample {
                id: s.id.clone(),
                source: Box::new(Error::dim(
                    "training_pair",
                    "input + output frames",
                    arch.input_frames + arch.output_frames,
                    s.inputs.len() + s.targets.len(),
                )),
            });
        }
        match arch.inference_mode {
            InferenceMode::DirectMapped => {
                xs.extend_from_slice(&s.inputs);
                ys.extend_from_slice(&s.targets);
            }
            InferenceMode::Autoregressive => {
                let all: Vec<_> = s.frames().cloned().collect();
                xs.extend_from_slice(&all[..all.len() - 1]);
                ys.extend_from_slice(&all[1..]);
            }
        }
    }
    let steps = arch.training_steps();
    let (h, w) = batch[0].frame_dims();
    let shape = [batch.len(), steps, 1, h, w];
    let x = stack_frames::<T>(&xs).reshape(&shape)?;
    let y = stack_frames::<T>(&ys).reshape(&shape)?;
    Ok((x, y))
}

/// One Adadelta step on the mean BCE of `batch`. Returns the loss measured
/// before the update. On any error (including a non-finite loss or
/// gradient) neither `params` nor `opt` is modified.
pub fn train_step<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut OptimState<T>,
    batch: &[SequenceSample],
) -> Result<f64> {
    let (x, y) = training_pair(params, batch)?;
    let (pred, cache) = params.forward(&x, Mode::Train)?;
    let loss = bce_loss(&pred, &y)?;
    if !loss.value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {}", loss.value)));
    }
    let grads = params.backward(&cache, &loss.gradient)?;
    let named = grads.named();
    if let Some((name, _)) = named.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    let aligned = opt.slots.len() == named.len()
        && opt
            .slots
            .iter()
            .zip(&named)
            .all(|((sn, st), (gn, g))| sn == gn && st.sq_grad.shape() == g.shape());
    if !aligned {
        return Err(Error::InvalidConfig(
            "optimizer state does not match the model parameters".into(),
        ));
    }
    opt.config.validate()?;
    for ((_, p), ((_, st), (_, g))) in params.trainable_mut().into_iter().zip(opt.slots.iter_mut().zip(&named)) {
        adadelta_step(p, g, st, &opt.config)?;
    }
    params.commit_running_stats(&cache);
    Ok(loss.value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
    pub shuffle: bool,
    /// Epoch number of the first epoch run (non-zero when resuming).
    pub start_epoch: usize,
}

pub const DEFAULT_EPOCHS: usize = 25;

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: DEFAULT_EPOCHS,
            batch_size: 1,
            seed: 0,
            shuffle: true,
            start_epoch: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    /// One-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub step_losses: Vec<f64>,
}

/// Sample order of `epoch`; depends only on the seed and the epoch number.
fn epoch_order(n: usize, opts: &TrainOptions, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if opts.shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

/// Runs epochs `start_epoch + 1 ..= start_epoch + epochs`, calling
/// `on_epoch` after each one (e.g. to checkpoint).
pub fn fit<T: Scalar>(
    params: &mut ModelParams<T>,
    opt: &mut OptimState<T>,
    samples: &[SequenceSample],
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochSummary, &ModelParams<T>, &OptimState<T>) -> Result<()>,
) -> Result<Vec<EpochSummary>> {
    if opts.epochs == 0 || opts.batch_size == 0 {
        return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
    }
    if samples.is_empty() {
        return Err(Error::InvalidConfig("no training samples".into()));
    }
    let mut out = Vec::with_capacity(opts.epochs);
    for e in opts.start_epoch..opts.start_epoch + opts.epochs {
        let order = epoch_order(samples.len(), opts, e);
        let mut losses = Vec::new();
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<SequenceSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            losses.push(train_step(params, opt, &batch)?);
        }
        let summary = EpochSummary {
            epoch: e + 1,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            step_losses: losses,
        };
        on_epoch(&summary, params, opt)?;
        out.push(summary);
    }
    Ok(out)
}

/// Forecasts `output_frames` frames from `x` (`[N, input_frames, 1, h, w]`)
/// with running batch-norm statistics.
///
/// DirectMapped runs a single Infer-mode forward. Autoregressive warms the
/// stack up on the inputs, then feeds each predicted frame back as the next
/// input while carrying the recurrent state.
pub fn predict<T: Scalar>(params: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let arch = &params.arch;
    match arch.inference_mode {
        InferenceMode::DirectMapped => Ok(params.forward(x, Mode::Infer)?.0),
        InferenceMode::Autoregressive => {
            params.check_input(x, "predict")?;
            if x.shape()[1] != arch.input_frames {
                return Err(Error::dim("predict", "frame count", arch.input_frames, x.shape()[1]));
            }
            let (y, _, mut states) = params.run_stack(x, Mode::Infer, None)?;
            let mut frame = y.time_slice(arch.input_frames - 1);
            let mut out = Vec::with_capacity(arch.output_frames);
            out.push(frame.clone());
            while out.len() < arch.output_frames {
                let step = Tensor::stack_time(std::slice::from_ref(&frame));
                let (y, _, next) = params.run_stack(&step, Mode::Infer, Some(&states))?;
                states = next;
                frame = y.time_slice(0);
                out.push(frame.clone());
            }
            Ok(Tensor::stack_time(&out))
        }
    }
}
