//! Sigmoid-headed convolution mapping each timestep's `F` channels to one
//! output frame.

use rand::Rng;

use crate::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use crate::error::{Error, Result};
use crate::layers::glorot_limit;
use crate::tensor::{sigmoid, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = f32> {
    /// `[1, F, k, k]`
    pub kernels: Tensor<T>,
    /// `[1]`
    pub bias: Tensor<T>,
    spec: ConvSpec,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(filters: usize, kernel: usize) -> Result<Self> {
        let spec = ConvSpec::square(filters, 1, kernel)?;
        Ok(HeadParams {
            kernels: Tensor::zeros(&spec.kernel_shape()),
            bias: Tensor::zeros(&[1]),
            spec,
        })
    }

    pub fn init<R: Rng + ?Sized>(filters: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(filters, kernel)?;
        let kk = kernel * kernel;
        let lim = glorot_limit(filters * kk, kk);
        p.kernels = Tensor::uniform(&p.spec.kernel_shape(), -lim, lim, rng);
        Ok(p)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernels.shape() != self.spec.kernel_shape() {
            return Err(Error::shape(
                "head kernels",
                self.kernels.shape(),
                &self.spec.kernel_shape(),
            ));
        }
        if self.bias.shape() != [1] {
            return Err(Error::shape("head bias", self.bias.shape(), &[1]));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> HeadParams<U> {
        HeadParams {
            kernels: self.kernels.cast(),
            bias: self.bias.cast(),
            spec: self.spec,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
    seq_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads<T> {
    pub d_hidden: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `[N, T, F, h, w]` → `[N, T, 1, h, w]` with every value in (0, 1).
pub fn output_head_forward<T: Scalar>(
    hidden_seq: &Tensor<T>,
    head: &HeadParams<T>,
) -> Result<(Tensor<T>, HeadCache<T>)> {
    if hidden_seq.rank() != 5 {
        return Err(Error::dim("output head", "sequence rank", 5, hidden_seq.rank()));
    }
    let s = hidden_seq.shape();
    if s[2] != head.spec.in_channels() {
        return Err(Error::dim("output head", "channels", head.spec.in_channels(), s[2]));
    }
    // Time folds into batch: the layout of [N, T, F, h, w] is [N·T, F, h, w].
    let flat = hidden_seq.reshape(&[s[0] * s[1], s[2], s[3], s[4]])?;
    let z = conv2d_forward(&flat, &head.spec, &head.kernels, &head.bias)?;
    let y = z.map(sigmoid);
    let out = y.reshape(&[s[0], s[1], 1, s[3], s[4]])?;
    Ok((
        out,
        HeadCache {
            input: flat,
            output: y,
            seq_shape: s.to_vec(),
        },
    ))
}

/// `dy` is the gradient with respect to the sigmoid output.
pub fn output_head_backward<T: Scalar>(
    cache: &HeadCache<T>,
    head: &HeadParams<T>,
    dy: &Tensor<T>,
) -> Result<HeadGrads<T>> {
    let s = &cache.seq_shape;
    let want = [s[0], s[1], 1, s[3], s[4]];
    if dy.shape() != want {
        return Err(Error::Backward(format!(
            "head cache expects upstream {want:?}, got {:?}",
            dy.shape()
        )));
    }
    let y = cache.output.data();
    let dz: Vec<T> = dy.data().iter().zip(y).map(|(&g, &p)| g * p * (T::one() - p)).collect();
    let dz = Tensor::from_parts(cache.output.shape().to_vec(), dz);
    let g = conv2d_backward(&cache.input, &head.spec, &head.kernels, &dz)?;
    Ok(HeadGrads {
        d_hidden: g.d_input.into_shape(s.clone()),
        kernels: g.d_kernels,
        bias: g.d_bias,
    })
}
