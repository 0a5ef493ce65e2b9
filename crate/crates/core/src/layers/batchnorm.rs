//! Per-channel batch normalization over `[N, T, C, h, w]` or `[N, C, h, w]`.
//!
//! Statistics are taken over every axis except the channel axis, so a
//! sequence-valued activation is normalized jointly over batch, time and
//! space.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_MOMENTUM: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub epsilon: T,
    pub momentum: T,
}

impl<T: Scalar> BatchNormParams<T> {
    /// γ = 1, β = 0, running mean 0 and running variance 1.
    pub fn new(channels: usize, epsilon: f64, momentum: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("batchnorm epsilon {epsilon} must be > 0")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "batchnorm momentum {momentum} must lie in (0, 1)"
            )));
        }
        Ok(BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            epsilon: T::lit(epsilon),
            momentum: T::lit(momentum),
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = [self.channels()];
        for (name, t) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.shape() != c {
                return Err(Error::shape(format!("batchnorm {name}"), t.shape(), &c));
            }
        }
        if self.running_var.data().iter().any(|&v| v < T::zero()) {
            return Err(Error::OutOfRange("batchnorm running_var must be >= 0".into()));
        }
        Ok(())
    }

    /// Folds a Train-mode batch's statistics into the running estimates.
    pub fn update_running(&mut self, cache: &BatchNormCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + keep * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = m * *r + keep * b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            epsilon: U::lit(self.epsilon.as_f64()),
            momentum: U::lit(self.momentum.as_f64()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    mode: Mode,
    outer: usize,
    inner: usize,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    gamma: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

impl<T> BatchNormCache<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn channel_layout<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    let axis = match x.rank() {
        5 => 2,
        4 => 1,
        r => return Err(Error::dim("batchnorm", "input rank (4 or 5)", 5, r)),
    };
    let s = x.shape();
    if s[axis] != channels {
        return Err(Error::dim("batchnorm", "channels", channels, s[axis]));
    }
    Ok((s[..axis].iter().product(), s[axis + 1..].iter().product()))
}

/// Train mode normalizes with the batch statistics (biased variance) and
/// records them in the cache; the running estimates change only through
/// [`BatchNormParams::update_running`]. Infer mode uses the running
/// estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &BatchNormParams<T>,
    mode: Mode,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let c = params.channels();
    let (outer, inner) = channel_layout(x, c)?;
    let count = T::lit((outer * inner) as f64);
    let data = x.data();
    let channel = |o: usize, ch: usize| &data[(o * c + ch) * inner..][..inner];

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let s: f64 = (0..outer).flat_map(|o| channel(o, ch).iter()).map(|v| v.as_f64()).sum();
                let m = s / (outer * inner) as f64;
                let sq: f64 = (0..outer)
                    .flat_map(|o| channel(o, ch).iter())
                    .map(|v| (v.as_f64() - m).powi(2))
                    .sum();
                mean[ch] = T::lit(m);
                var[ch] = T::lit(sq) / count;
            }
            (mean, var)
        }
        Mode::Infer => (params.running_mean.data().to_vec(), params.running_var.data().to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + params.epsilon).sqrt()).collect();
    let (gamma, beta) = (params.gamma.data(), params.beta.data());
    let mut x_hat = vec![T::zero(); data.len()];
    let mut y = vec![T::zero(); data.len()];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            for k in off..off + inner {
                let xh = (data[k] - mean[ch]) * inv_std[ch];
                x_hat[k] = xh;
                y[k] = gamma[ch] * xh + beta[ch];
            }
        }
    }
    let cache = BatchNormCache {
        mode,
        outer,
        inner,
        x_hat: if mode == Mode::Train { x_hat } else { Vec::new() },
        inv_std,
        gamma: gamma.to_vec(),
        batch_mean: mean,
        batch_var: var,
    };
    Ok((Tensor::from_parts(x.shape().to_vec(), y), cache))
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

/// Exact gradients through the batch statistics. Refuses Infer-mode caches.
pub fn batchnorm_backward<T: Scalar>(cache: &BatchNormCache<T>, dy: &Tensor<T>) -> Result<BatchNormGrads<T>> {
    if cache.mode != Mode::Train {
        return Err(Error::Backward("batchnorm was run in Infer mode".into()));
    }
    let c = cache.gamma.len();
    let (outer, inner) = (cache.outer, cache.inner);
    if dy.len() != cache.x_hat.len() || channel_layout(dy, c).ok() != Some((outer, inner)) {
        return Err(Error::Backward(format!(
            "batchnorm cache does not match upstream gradient {:?}",
            dy.shape()
        )));
    }
    let g = dy.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for o in 0..outer {
        for ch in 0..c {
            let off = (o * c + ch) * inner;
            for (&gk, &xk) in g[off..off + inner].iter().zip(&cache.x_hat[off..off + inner]) {
                dbeta[ch] += gk;
                dgamma[ch] += gk * xk;
            }
        }
    }
    let m = T::lit((outer * inner) as f64);
    let mut dx = vec![T::zero(); g.len()];
    for o in 0..outer {
        for ch in 0..c {
            let scale = cache.gamma[ch] * cache.inv_std[ch] / m;
            let off = (o * c + ch) * inner;
            for k in off..off + inner {
                dx[k] = scale * (m * g[k] - dbeta[ch] - cache.x_hat[k] * dgamma[ch]);
            }
        }
    }
    Ok(BatchNormGrads {
        dx: Tensor::from_parts(dy.shape().to_vec(), dx),
        dgamma: Tensor::from_parts(vec![c], dgamma),
        dbeta: Tensor::from_parts(vec![c], dbeta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{reduce, ReduceKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn channel_stats(y: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
        let m = reduce(y, &[0, 1, 3, 4], ReduceKind::Mean).unwrap();
        let v = reduce(y, &[0, 1, 3, 4], ReduceKind::Variance).unwrap();
        (m.into_data(), v.into_data())
    }

    #[test]
    fn train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f64>::uniform(&[2, 3, 2, 4, 4], -3.0, 5.0, &mut rng);
        let p = BatchNormParams::new(2, DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        let (y, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        let (m, v) = channel_stats(&y);
        for ch in 0..2 {
            assert!(m[ch].abs() < 1e-5);
            assert!((v[ch] - 1.0).abs() < 1e-3, "{}", v[ch]);
        }
    }

    #[test]
    fn constant_channel_maps_to_beta() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 2, 3, 3], |i| if (i / 9) % 2 == 0 { 4.0 } else { -1.5 });
        let mut p = BatchNormParams::new(2, DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        p.beta = Tensor::new(&[2], vec![0.25, -0.75]).unwrap();
        let (y, _) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            assert_eq!(v, p.beta.data()[(i / 9) % 2]);
        }
    }

    #[test]
    fn affine_on_standardized_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = Tensor::<f64>::uniform(&[4, 1, 6, 6], 0.0, 1.0, &mut rng);
        let mut p = BatchNormParams::new(1, 1e-12, DEFAULT_MOMENTUM).unwrap();
        let (z, _) = batchnorm_forward(&raw, &p, Mode::Train).unwrap();
        p.gamma = Tensor::full(&[1], 2.0);
        p.beta = Tensor::full(&[1], 1.0);
        let (y, _) = batchnorm_forward(&z, &p, Mode::Train).unwrap();
        assert!((y.mean() - 1.0).abs() < 1e-9);
        let v = reduce(&y, &[0, 1, 2, 3], ReduceKind::Variance).unwrap().data()[0];
        assert!((v - 4.0).abs() < 1e-6, "{v}");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let mut p = BatchNormParams::new(1, DEFAULT_EPSILON, 0.9).unwrap();
        let (_, cache) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        assert_eq!(p.running_mean.data(), &[0.0]);
        p.update_running(&cache);
        assert!((p.running_mean.data()[0] - 0.1 * 1.5).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn infer_uses_initial_running_stats() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 2, 2], |i| i as f64);
        let p = BatchNormParams::new(1, DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        let (y, cache) = batchnorm_forward(&x, &p, Mode::Infer).unwrap();
        let s = 1.0 / (1.0 + DEFAULT_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * s).abs() < 1e-12);
        }
        assert!(matches!(batchnorm_backward(&cache, &x), Err(Error::Backward(_))));
    }

    #[test]
    fn dbeta_is_sum_of_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let dy = Tensor::<f64>::uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
        let p = BatchNormParams::new(3, DEFAULT_EPSILON, DEFAULT_MOMENTUM).unwrap();
        let (_, cache) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
        let g = batchnorm_backward(&cache, &dy).unwrap();
        let want = reduce(&dy, &[0, 2, 3], ReduceKind::Sum).unwrap();
        assert!(g.dbeta.max_abs_diff(&want).unwrap() < 1e-12);

        let z = batchnorm_backward(&cache, &Tensor::zeros(&[2, 3, 4, 4])).unwrap();
        assert!(z.dx.data().iter().chain(z.dgamma.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(BatchNormParams::<f32>::new(1, 0.0, 0.9).is_err());
        assert!(BatchNormParams::<f32>::new(1, 1e-3, 1.0).is_err());
    }
}
