//! Stride-1, same-padded 2-D cross-correlation over `[N, C, H, W]` tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// The only padding mode the layers need: zero borders sized so that output
/// spatial dimensions equal the input's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel_h: usize, kernel_w: usize) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::InvalidConfig("convolution channel counts must be >= 1".into()));
        }
        if kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "same padding needs odd kernel sides, got {kernel_h}x{kernel_w}"
            )));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
        })
    }

    pub fn square(in_channels: usize, out_channels: usize, kernel: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, kernel, kernel)
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }
    pub fn out_channels(&self) -> usize {
        self.out_channels
    }
    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }
    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }
    pub fn padding(&self) -> Padding {
        Padding::Same
    }
    pub fn stride(&self) -> usize {
        1
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_h, self.kernel_w]
    }

    fn check_input<T: Scalar>(&self, op: &str, input: &Tensor<T>) -> Result<()> {
        if input.rank() != 4 {
            return Err(Error::dim(op, "input rank", 4, input.rank()));
        }
        if input.shape()[1] != self.in_channels {
            return Err(Error::dim(op, "input channels", self.in_channels, input.shape()[1]));
        }
        Ok(())
    }

    fn check_kernels<T: Scalar>(&self, op: &str, kernels: &Tensor<T>) -> Result<()> {
        if kernels.shape() != self.kernel_shape() {
            return Err(Error::shape(
                format!("{op} kernels"),
                kernels.shape(),
                &self.kernel_shape(),
            ));
        }
        Ok(())
    }
}

/// Overlapping index range for a shift `d` along an axis of length `len`:
/// output positions `lo..hi` read input positions `lo + d..hi + d`.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = ((-d).max(0) as usize).min(len);
    let hi = (len as isize - d).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

/// Adds the cross-correlation of `input` with `kernels` into `out`
/// (`[N, C_out, H, W]`, already holding any bias).
pub(crate) fn conv2d_accumulate<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec, kernels: &Tensor<T>, out: &mut [T]) {
    let [n, _, h, w] = dims4(input);
    let (cin, cout, kh, kw) = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let x = input.data();
    let k = kernels.data();
    for b in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(b * cout + co) * plane..][..plane];
            for ci in 0..cin {
                let in_plane = &x[(b * cin + ci) * plane..][..plane];
                let kbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..kw {
                        let wgt = k[kbase + ky * kw + kx];
                        if wgt == T::zero() {
                            continue;
                        }
                        let dx = kx as isize - pw;
                        let (x0, x1) = valid_range(w, dx);
                        // Kernels wider than the frame have taps that never land.
                        if x0 == x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let src_row = (y as isize + dy) as usize * w;
                            let src = &in_plane[(src_row as isize + x0 as isize + dx) as usize..][..x1 - x0];
                            let dst = &mut out_plane[y * w + x0..y * w + x1];
                            for (o, &s) in dst.iter_mut().zip(src) {
                                *o += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> [usize; 4] {
    let s = t.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Same-padded, stride-1 cross-correlation (no kernel flip) plus a bias per
/// output channel.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    const OP: &str = "conv2d_forward";
    spec.check_input(OP, input)?;
    spec.check_kernels(OP, kernels)?;
    if bias.shape() != [spec.out_channels] {
        return Err(Error::shape("conv2d_forward bias", bias.shape(), &[spec.out_channels]));
    }
    let [n, _, h, w] = dims4(input);
    let plane = h * w;
    let mut out = vec![T::zero(); n * spec.out_channels * plane];
    for (i, chunk) in out.chunks_mut(plane).enumerate() {
        chunk.fill(bias.data()[i % spec.out_channels]);
    }
    conv2d_accumulate(input, spec, kernels, &mut out);
    Ok(Tensor::from_parts(vec![n, spec.out_channels, h, w], out))
}

/// Gradients of a convolution output with respect to input, kernels, and
/// bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub d_input: Tensor<T>,
    pub d_kernels: Tensor<T>,
    pub d_bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec,
    kernels: &Tensor<T>,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    const OP: &str = "conv2d_backward";
    spec.check_input(OP, input)?;
    spec.check_kernels(OP, kernels)?;
    let [n, _, h, w] = dims4(input);
    let expected = [n, spec.out_channels, h, w];
    if upstream.shape() != expected {
        return Err(Error::shape(
            "conv2d_backward upstream_grad",
            upstream.shape(),
            &expected,
        ));
    }
    let (cin, cout, kh, kw) = (spec.in_channels, spec.out_channels, spec.kernel_h, spec.kernel_w);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let plane = h * w;
    let x = input.data();
    let k = kernels.data();
    let g = upstream.data();

    let mut d_input = vec![T::zero(); x.len()];
    let mut d_kernels = vec![T::zero(); k.len()];
    let mut d_bias = vec![T::zero(); cout];

    for b in 0..n {
        for co in 0..cout {
            let g_plane = &g[(b * cout + co) * plane..][..plane];
            d_bias[co] += g_plane.iter().copied().sum::<T>();
            for ci in 0..cin {
                let in_plane = &x[(b * cin + ci) * plane..][..plane];
                let dx_plane = &mut d_input[(b * cin + ci) * plane..][..plane];
                let kbase = (co * cin + ci) * kh * kw;
                for ky in 0..kh {
                    let dy = ky as isize - ph;
                    let (y0, y1) = valid_range(h, dy);
                    for kx in 0..kw {
                        let dxs = kx as isize - pw;
                        let (x0, x1) = valid_range(w, dxs);
                        if x0 == x1 {
                            continue;
                        }
                        let wgt = k[kbase + ky * kw + kx];
                        let mut acc = T::zero();
                        for y in y0..y1 {
                            let src = ((y as isize + dy) as usize * w) as isize + x0 as isize + dxs;
                            let src = src as usize;
                            let gr = &g_plane[y * w + x0..y * w + x1];
                            let xr = &in_plane[src..src + (x1 - x0)];
                            let dxr = &mut dx_plane[src..src + (x1 - x0)];
                            for ((&gv, &xv), dv) in gr.iter().zip(xr).zip(dxr) {
                                acc += gv * xv;
                                *dv += wgt * gv;
                            }
                        }
                        d_kernels[kbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        d_input: Tensor::from_parts(input.shape().to_vec(), d_input),
        d_kernels: Tensor::from_parts(kernels.shape().to_vec(), d_kernels),
        d_bias: Tensor::from_parts(vec![cout], d_bias),
    })
}
