//! Fixed-cadence windows of frames split into input and target halves.

use std::collections::HashSet;

use chrono::TimeDelta;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::frame::RadarFrame;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A training pair: `inputs` immediately followed by `targets` at the
/// configured cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    pub inputs: Vec<RadarFrame>,
    pub targets: Vec<RadarFrame>,
    /// Source identifier of every underlying frame, inputs first.
    pub provenance: Vec<String>,
    /// Set when the sample was generated under a degraded condition, e.g. a
    /// synthetic blob leaving the frame.
    pub warning: Option<String>,
}

impl SequenceSample {
    pub fn new(id: impl Into<String>, inputs: Vec<RadarFrame>, targets: Vec<RadarFrame>) -> Result<Self> {
        let id = id.into();
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidConfig(format!("sample {id} has no input frames")))?;
        let (h, w) = (first.height(), first.width());
        if targets.is_empty() {
            return Err(Error::InvalidConfig(format!("sample {id} has no target frames")));
        }
        for f in inputs.iter().chain(&targets) {
            if (f.height(), f.width()) != (h, w) {
                return Err(Error::shape(
                    format!("sample {id} frame"),
                    &[f.height(), f.width()],
                    &[h, w],
                ));
            }
        }
        let provenance = inputs.iter().chain(&targets).map(RadarFrame::key).collect();
        Ok(SequenceSample {
            id,
            inputs,
            targets,
            provenance,
            warning: None,
        })
    }

    pub fn frames(&self) -> impl Iterator<Item = &RadarFrame> {
        self.inputs.iter().chain(&self.targets)
    }

    pub fn frame_dims(&self) -> (usize, usize) {
        (self.inputs[0].height(), self.inputs[0].width())
    }

    /// `[T_in, 1, h, w]`
    pub fn input_tensor<T: Scalar>(&self) -> Tensor<T> {
        stack_frames(&self.inputs)
    }

    /// `[T_out, 1, h, w]`
    pub fn target_tensor<T: Scalar>(&self) -> Tensor<T> {
        stack_frames(&self.targets)
    }
}

/// Stacks equally sized frames into `[T, 1, h, w]`.
pub fn stack_frames<T: Scalar>(frames: &[RadarFrame]) -> Tensor<T> {
    let (h, w) = (frames[0].height(), frames[0].width());
    let data = frames
        .iter()
        .flat_map(|f| f.pixels().iter().map(|&v| T::lit(v as f64)))
        .collect();
    Tensor::from_parts(vec![frames.len(), 1, h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SequenceLayout {
    pub input_frames: usize,
    pub output_frames: usize,
    pub cadence: TimeDelta,
    /// Window advance within a gapless run, in frames.
    pub stride: usize,
}

impl Default for SequenceLayout {
    /// 18 + 18 frames every 5 minutes: a 3-hour window.
    fn default() -> Self {
        SequenceLayout {
            input_frames: 18,
            output_frames: 18,
            cadence: TimeDelta::minutes(5),
            stride: 1,
        }
    }
}

impl SequenceLayout {
    pub fn window(&self) -> usize {
        self.input_frames + self.output_frames
    }

    /// Time from the first to the last frame of a window.
    pub fn span(&self) -> TimeDelta {
        self.cadence * (self.window() as i32 - 1)
    }

    fn gap_ok(&self, a: &RadarFrame, b: &RadarFrame) -> bool {
        let gap = (b.timestamp - a.timestamp).num_milliseconds() as f64;
        let c = self.cadence.num_milliseconds() as f64;
        gap >= 0.9 * c && gap <= 1.1 * c
    }
}

/// Slides a window over every gapless run of `frames`. A gap outside ±10%
/// of the cadence (or out-of-order timestamps) ends a run; nothing is
/// interpolated.
pub fn build_sequences(frames: &[RadarFrame], layout: &SequenceLayout) -> Vec<SequenceSample> {
    let window = layout.window();
    let stride = layout.stride.max(1);
    let mut out = Vec::new();
    let mut run_start = 0;
    for end in 1..=frames.len() {
        let breaks = end == frames.len() || !layout.gap_ok(&frames[end - 1], &frames[end]);
        if !breaks {
            continue;
        }
        let run = &frames[run_start..end];
        let mut s = 0;
        while s + window <= run.len() {
            let w = &run[s..s + window];
            let id = format!("seq-{}", w[0].timestamp.format("%Y%m%d%H%M"));
            let sample = SequenceSample::new(id, w[..layout.input_frames].to_vec(), w[layout.input_frames..].to_vec());
            // Frames within one run can still differ in size; such windows are skipped.
            if let Ok(sample) = sample {
                out.push(sample);
            }
            s += stride;
        }
        run_start = end;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitPolicy {
    /// The chronologically latest samples form the validation set.
    ByTimeRange,
    Random(u64),
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Vec<SequenceSample>,
    pub val: Vec<SequenceSample>,
    /// Training candidates removed because they share frames with
    /// validation samples.
    pub dropped: usize,
}

/// Splits into disjoint train and validation sets. `round(n·val_fraction)`
/// samples go to validation; training samples sharing any frame with the
/// validation set are dropped so the split is disjoint at the frame level.
pub fn split_train_val(samples: Vec<SequenceSample>, val_fraction: f64, policy: SplitPolicy) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "val_fraction {val_fraction} must lie in (0, 1)"
        )));
    }
    let n = samples.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::InvalidConfig(format!(
            "{n} samples cannot be split with val_fraction {val_fraction}"
        )));
    }
    let mut samples = samples;
    match policy {
        SplitPolicy::ByTimeRange => samples.sort_by_key(|s| s.inputs[0].timestamp),
        SplitPolicy::Random(seed) => samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    let val = samples.split_off(n - n_val);
    let val_frames: HashSet<&str> = val
        .iter()
        .flat_map(|s| s.provenance.iter().map(String::as_str))
        .collect();
    let before = samples.len();
    let train: Vec<SequenceSample> = samples
        .into_iter()
        .filter(|s| s.provenance.iter().all(|p| !val_frames.contains(p.as_str())))
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidConfig(
            "no training samples remain after removing frames shared with validation".into(),
        ));
    }
    let dropped = before - train.len();
    Ok(Split { train, val, dropped })
}
