//! RMSE evaluation of forecasters over a set of sequences.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::sequence::SequenceSample;
use crate::error::{Error, Result};
use crate::model::{predict, ModelParams};
use crate::tensor::Tensor;

fn check_unit<T: crate::tensor::Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().find(|v| !(v.as_f64() >= 0.0 && v.as_f64() <= 1.0)) {
        Some(v) => Err(Error::OutOfRange(format!("rmse {what} value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

/// Squared residuals summed per leading-axis slice, with the slice size.
fn sq_err_by_frame(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<(Vec<f64>, usize)> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("rmse", pred.shape(), truth.shape()));
    }
    check_unit(pred, "prediction")?;
    check_unit(truth, "truth")?;
    let frames = pred.shape().first().copied().unwrap_or(1).max(1);
    let per = pred.len() / frames;
    let sums = pred
        .data()
        .chunks(per.max(1))
        .zip(truth.data().chunks(per.max(1)))
        .map(|(a, b)| {
            a.iter()
                .zip(b)
                .map(|(&p, &t)| {
                    let d = p as f64 - t as f64;
                    d * d
                })
                .sum()
        })
        .collect();
    Ok((sums, per))
}

/// Root mean squared error over every element, in normalized units.
pub fn rmse(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    let (sums, _) = sq_err_by_frame(pred, truth)?;
    if pred.is_empty() {
        return Err(Error::InvalidConfig("rmse of empty tensors".into()));
    }
    Ok((sums.iter().sum::<f64>() / pred.len() as f64).sqrt())
}

/// Anything that maps an input sequence `[T_in, 1, h, w]` to a forecast
/// `[T_out, 1, h, w]`.
pub trait Forecaster {
    fn forecast(&self, inputs: &Tensor<f32>, horizon: usize) -> Result<Tensor<f32>>;
    /// Stable text identifying the configuration, hashed into reports.
    fn describe(&self) -> String;
}

impl Forecaster for ModelParams<f32> {
    fn forecast(&self, inputs: &Tensor<f32>, horizon: usize) -> Result<Tensor<f32>> {
        if horizon != self.arch.output_frames {
            return Err(Error::dim("forecast", "horizon", self.arch.output_frames, horizon));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(inputs.shape());
        let y = predict(self, &inputs.reshape(&shape)?)?;
        y.reshape(&y.shape()[1..])
    }

    fn describe(&self) -> String {
        format!("convlstm\n{}", toml::to_string(&self.arch).unwrap_or_default())
    }
}

/// Repeats the last observed frame.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Forecaster for Persistence {
    fn forecast(&self, inputs: &Tensor<f32>, horizon: usize) -> Result<Tensor<f32>> {
        let s = inputs.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::dim("persistence", "input rank", 4, s.len()));
        }
        let per = inputs.len() / s[0];
        let last = &inputs.data()[inputs.len() - per..];
        let data = last.iter().copied().cycle().take(per * horizon).collect();
        Tensor::new(&[horizon, s[1], s[2], s[3]], data)
    }

    fn describe(&self) -> String {
        "persistence".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// √ of the pooled mean squared error over every pixel of every sample.
    pub rmse_overall: f64,
    /// Mean of the per-sample RMSEs.
    pub rmse_mean_per_sample: f64,
    /// Pooled RMSE restricted to each forecast position.
    pub rmse_per_leadtime: Vec<f64>,
    pub n_samples: usize,
    /// SHA-256 of the forecaster description.
    pub config_fingerprint: String,
}

pub fn evaluate<F: Forecaster + ?Sized>(forecaster: &F, samples: &[SequenceSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("evaluation dataset is empty".into()));
    }
    let horizon = samples[0].targets.len();
    let mut lead_sums = vec![0.0f64; horizon];
    let mut lead_counts = vec![0usize; horizon];
    let mut per_sample = 0.0;
    for s in samples {
        let wrap = |e| Error::Sample {
            id: s.id.clone(),
            source: Box::new(e),
        };
        if s.targets.len() != horizon {
            return Err(wrap(Error::dim("evaluate", "target frames", horizon, s.targets.len())));
        }
        let truth = s.target_tensor::<f32>();
        let pred = forecaster.forecast(&s.input_tensor(), horizon).map_err(wrap)?;
        let (sums, per) = sq_err_by_frame(&pred, &truth).map_err(wrap)?;
        for (k, v) in sums.iter().enumerate() {
            lead_sums[k] += v;
            lead_counts[k] += per;
        }
        per_sample += (sums.iter().sum::<f64>() / truth.len() as f64).sqrt();
    }
    let total: f64 = lead_sums.iter().sum();
    let count: usize = lead_counts.iter().sum();
    Ok(EvalReport {
        rmse_overall: (total / count as f64).sqrt(),
        rmse_mean_per_sample: per_sample / samples.len() as f64,
        rmse_per_leadtime: lead_sums
            .iter()
            .zip(&lead_counts)
            .map(|(s, &c)| (s / c as f64).sqrt())
            .collect(),
        n_samples: samples.len(),
        config_fingerprint: hex::encode(Sha256::digest(forecaster.describe().as_bytes())),
    })
}

impl EvalReport {
    /// Human-readable table, one row per lead time.
    pub fn to_table(&self, cadence_minutes: i64) -> String {
        let mut s = format!(
            "samples            {}\nrmse (pooled)      {:.5}\nrmse (per-sample)  {:.5}\nfingerprint        {}\n\nlead   minutes  rmse\n",
            self.n_samples,
            self.rmse_overall,
            self.rmse_mean_per_sample,
            &self.config_fingerprint[..12.min(self.config_fingerprint.len())]
        );
        for (k, v) in self.rmse_per_leadtime.iter().enumerate() {
            s.push_str(&format!(
                "{:>4}  {:>8}  {:.5}\n",
                k + 1,
                (k as i64 + 1) * cadence_minutes,
                v
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn anchors() {
        let a = Tensor::full(&[18, 1, 4, 4], 0.3f32);
        assert_eq!(rmse(&a, &a).unwrap(), 0.0);
        let half = Tensor::full(&[18, 1, 4, 4], 0.5f32);
        let zero = Tensor::zeros(&[18, 1, 4, 4]);
        assert!((rmse(&half, &zero).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn checkerboard_offset() {
        let truth = Tensor::full(&[2, 1, 4, 4], 0.5f32);
        let pred = Tensor::from_fn(&[2, 1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 0.6 } else { 0.4 });
        assert!((rmse(&pred, &truth).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        assert!(rmse(&t(&[2], vec![0.0, 0.0]), &t(&[1, 2], vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn persistence_repeats_last_frame() {
        let x = t(&[2, 1, 1, 2], vec![0.1, 0.2, 0.3, 0.4]);
        let y = Persistence.forecast(&x, 3).unwrap();
        assert_eq!(y.data(), [0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
    }
}
