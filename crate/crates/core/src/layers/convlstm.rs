//! Convolutional LSTM cell and its time-unrolled layer.
//!
//! With `*` a same-padded convolution and `∘` the elementwise product:
//!
//! ```text
//! i_t = σ(W_xi * x_t + W_hi * H_{t-1} + b_i)
//! f_t = σ(W_xf * x_t + W_hf * H_{t-1} + b_f)
//! C_t = f_t ∘ C_{t-1} + i_t ∘ tanh(W_xc * x_t + W_hc * H_{t-1} + b_c)
//! o_t = σ(W_xo * x_t + W_ho * H_{t-1} + b_o)
//! H_t = o_t ∘ tanh(C_t)
//! ```
//!
//! The packed `4·F` axis of the kernels and bias holds the gates in the
//! order (i, f, c, o). Optional peephole weights add `W_ci ∘ C_{t-1}` to the
//! input gate, `W_cf ∘ C_{t-1}` to the forget gate and `W_co ∘ C_t` to the
//! output gate.

use rand::Rng;

use crate::conv::{conv2d_accumulate, conv2d_backward, ConvSpec};
use crate::error::{Error, Result};
use crate::layers::glorot_limit;
use crate::tensor::{sigmoid, tanh, Scalar, Tensor};

/// Packed gate positions along the `4·F` axis.
pub const GATE_INPUT: usize = 0;
pub const GATE_FORGET: usize = 1;
pub const GATE_CELL: usize = 2;
pub const GATE_OUTPUT: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams<T = f32> {
    /// `[4F, C_in, k, k]`
    pub input_kernels: Tensor<T>,
    /// `[4F, F, k, k]`
    pub recurrent_kernels: Tensor<T>,
    /// `[4F]`
    pub bias: Tensor<T>,
    /// `[3F, h, w]` in the order (i, f, o) when enabled.
    pub peephole: Option<Tensor<T>>,
    filters: usize,
    input_spec: ConvSpec,
    recurrent_spec: ConvSpec,
}

impl<T: Scalar> ConvLstmParams<T> {
    /// All-zero parameters. `peephole_hw` enables peephole weights for frames
    /// of the given spatial size.
    pub fn zeros(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        peephole_hw: Option<(usize, usize)>,
    ) -> Result<Self> {
        let input_spec = ConvSpec::square(in_channels, 4 * filters, kernel)?;
        let recurrent_spec = ConvSpec::square(filters, 4 * filters, kernel)?;
        Ok(ConvLstmParams {
            input_kernels: Tensor::zeros(&input_spec.kernel_shape()),
            recurrent_kernels: Tensor::zeros(&recurrent_spec.kernel_shape()),
            bias: Tensor::zeros(&[4 * filters]),
            peephole: peephole_hw.map(|(h, w)| Tensor::zeros(&[3 * filters, h, w])),
            filters,
            input_spec,
            recurrent_spec,
        })
    }

    /// Glorot-uniform kernels, forget-gate bias 1, other biases and peepholes 0.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        filters: usize,
        kernel: usize,
        peephole_hw: Option<(usize, usize)>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut p = Self::zeros(in_channels, filters, kernel, peephole_hw)?;
        let kk = kernel * kernel;
        let lim = glorot_limit(in_channels * kk, 4 * filters * kk);
        p.input_kernels = Tensor::uniform(&p.input_spec.kernel_shape(), -lim, lim, rng);
        let lim = glorot_limit(filters * kk, 4 * filters * kk);
        p.recurrent_kernels = Tensor::uniform(&p.recurrent_spec.kernel_shape(), -lim, lim, rng);
        p.bias = Tensor::from_fn(&[4 * filters], |i| {
            if i / filters == GATE_FORGET {
                T::one()
            } else {
                T::zero()
            }
        });
        Ok(p)
    }

    pub fn filters(&self) -> usize {
        self.filters
    }
    pub fn in_channels(&self) -> usize {
        self.input_spec.in_channels()
    }
    pub fn kernel_size(&self) -> usize {
        self.input_spec.kernel_h()
    }
    pub fn input_spec(&self) -> &ConvSpec {
        &self.input_spec
    }
    pub fn recurrent_spec(&self) -> &ConvSpec {
        &self.recurrent_spec
    }

    /// Checks that tensor fields still agree with the layer geometry, e.g.
    /// after a checkpoint load.
    pub fn validate(&self) -> Result<()> {
        let f = self.filters;
        let check = |name: &str, t: &Tensor<T>, want: &[usize]| {
            if t.shape() != want {
                Err(Error::shape(format!("convlstm {name}"), t.shape(), want))
            } else {
                Ok(())
            }
        };
        check("input_kernels", &self.input_kernels, &self.input_spec.kernel_shape())?;
        check(
            "recurrent_kernels",
            &self.recurrent_kernels,
            &self.recurrent_spec.kernel_shape(),
        )?;
        check("bias", &self.bias, &[4 * f])?;
        if let Some(p) = &self.peephole {
            if p.rank() != 3 || p.shape()[0] != 3 * f {
                return Err(Error::shape("convlstm peephole", p.shape(), &[3 * f, 0, 0]));
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ConvLstmParams<U> {
        ConvLstmParams {
            input_kernels: self.input_kernels.cast(),
            recurrent_kernels: self.recurrent_kernels.cast(),
            bias: self.bias.cast(),
            peephole: self.peephole.as_ref().map(Tensor::cast),
            filters: self.filters,
            input_spec: self.input_spec,
            recurrent_spec: self.recurrent_spec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState<T = f32> {
    pub h: Tensor<T>,
    pub c: Tensor<T>,
}

impl<T: Scalar> ConvLstmState<T> {
    pub fn zeros(batch: usize, filters: usize, height: usize, width: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[batch, filters, height, width]),
            c: Tensor::zeros(&[batch, filters, height, width]),
        }
    }
}

/// Intermediates of one cell step, consumed by [`convlstm_cell_backward`].
#[derive(Debug, Clone)]
pub struct CellCache<T> {
    x: Tensor<T>,
    h_prev: Tensor<T>,
    c_prev: Tensor<T>,
    /// Activated gates `[N, 4F, h, w]` (i, f, tanh candidate, o).
    gates: Tensor<T>,
    c: Tensor<T>,
    tanh_c: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmGrads<T> {
    pub input_kernels: Tensor<T>,
    pub recurrent_kernels: Tensor<T>,
    pub bias: Tensor<T>,
    pub peephole: Option<Tensor<T>>,
}

impl<T: Scalar> ConvLstmGrads<T> {
    pub fn zeros_like(p: &ConvLstmParams<T>) -> Self {
        ConvLstmGrads {
            input_kernels: Tensor::zeros(p.input_kernels.shape()),
            recurrent_kernels: Tensor::zeros(p.recurrent_kernels.shape()),
            bias: Tensor::zeros(p.bias.shape()),
            peephole: p.peephole.as_ref().map(|t| Tensor::zeros(t.shape())),
        }
    }

    fn accumulate(&mut self, other: &Self) {
        self.input_kernels.add_assign(&other.input_kernels);
        self.recurrent_kernels.add_assign(&other.recurrent_kernels);
        self.bias.add_assign(&other.bias);
        if let (Some(a), Some(b)) = (&mut self.peephole, &other.peephole) {
            a.add_assign(b);
        }
    }
}

fn check_cell_inputs<T: Scalar>(x: &Tensor<T>, state: &ConvLstmState<T>, params: &ConvLstmParams<T>) -> Result<()> {
    const OP: &str = "convlstm cell";
    if x.rank() != 4 {
        return Err(Error::dim(OP, "x_t rank", 4, x.rank()));
    }
    if x.shape()[1] != params.in_channels() {
        return Err(Error::dim(OP, "x_t channels", params.in_channels(), x.shape()[1]));
    }
    let want = [x.shape()[0], params.filters, x.shape()[2], x.shape()[3]];
    if state.h.shape() != want {
        return Err(Error::shape("convlstm cell state H", state.h.shape(), &want));
    }
    if state.c.shape() != want {
        return Err(Error::shape("convlstm cell state C", state.c.shape(), &want));
    }
    if let Some(p) = &params.peephole {
        let pw = [3 * params.filters, want[2], want[3]];
        if p.shape() != pw {
            return Err(Error::shape("convlstm peephole", p.shape(), &pw));
        }
    }
    Ok(())
}

pub fn convlstm_cell_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &ConvLstmState<T>,
    params: &ConvLstmParams<T>,
) -> Result<(ConvLstmState<T>, CellCache<T>)> {
    check_cell_inputs(x, state, params)?;
    let [n, _, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let f = params.filters;
    let plane = h * w;
    let block = f * plane;

    let mut pre = vec![T::zero(); n * 4 * block];
    for (i, chunk) in pre.chunks_mut(plane).enumerate() {
        chunk.fill(params.bias.data()[i % (4 * f)]);
    }
    conv2d_accumulate(x, &params.input_spec, &params.input_kernels, &mut pre);
    conv2d_accumulate(&state.h, &params.recurrent_spec, &params.recurrent_kernels, &mut pre);

    let peep = params.peephole.as_ref().map(|p| p.data());
    let c_prev = state.c.data();
    let mut c_new = vec![T::zero(); n * block];
    let mut tanh_c = vec![T::zero(); n * block];
    let mut h_new = vec![T::zero(); n * block];
    for b in 0..n {
        let g = &mut pre[b * 4 * block..(b + 1) * 4 * block];
        let cp = &c_prev[b * block..(b + 1) * block];
        for j in 0..block {
            let (mut ip, mut fp) = (g[j], g[block + j]);
            if let Some(pw) = peep {
                ip += pw[j] * cp[j];
                fp += pw[block + j] * cp[j];
            }
            let ig = sigmoid(ip);
            let fg = sigmoid(fp);
            let cand = tanh(g[2 * block + j]);
            let c = fg * cp[j] + ig * cand;
            let mut op = g[3 * block + j];
            if let Some(pw) = peep {
                op += pw[2 * block + j] * c;
            }
            let og = sigmoid(op);
            let tc = tanh(c);
            g[j] = ig;
            g[block + j] = fg;
            g[2 * block + j] = cand;
            g[3 * block + j] = og;
            c_new[b * block + j] = c;
            tanh_c[b * block + j] = tc;
            h_new[b * block + j] = og * tc;
        }
    }
    let shape = vec![n, f, h, w];
    let c = Tensor::from_parts(shape.clone(), c_new);
    let new_state = ConvLstmState {
        h: Tensor::from_parts(shape.clone(), h_new),
        c: c.clone(),
    };
    let cache = CellCache {
        x: x.clone(),
        h_prev: state.h.clone(),
        c_prev: state.c.clone(),
        gates: Tensor::from_parts(vec![n, 4 * f, h, w], pre),
        c,
        tanh_c: Tensor::from_parts(shape, tanh_c),
    };
    Ok((new_state, cache))
}

/// Gradients of one cell step.
#[derive(Debug, Clone)]
pub struct CellGrads<T> {
    pub dx: Tensor<T>,
    pub d_state_prev: ConvLstmState<T>,
    pub params: ConvLstmGrads<T>,
}

/// Backpropagates `dH_t` and `dC_t` through one cell step. Gradient from the
/// hidden output and from the carried cell state are summed where the paths
/// merge at `C_t`.
pub fn convlstm_cell_backward<T: Scalar>(
    cache: &CellCache<T>,
    params: &ConvLstmParams<T>,
    dh: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<CellGrads<T>> {
    if dh.shape() != cache.c.shape() {
        return Err(Error::Backward(format!(
            "convlstm cache holds state {:?}, dH_t is {:?}",
            cache.c.shape(),
            dh.shape()
        )));
    }
    if dc.shape() != cache.c.shape() {
        return Err(Error::Backward(format!(
            "convlstm cache holds state {:?}, dC_t is {:?}",
            cache.c.shape(),
            dc.shape()
        )));
    }
    if cache.x.shape()[1] != params.in_channels()
        || cache.gates.shape()[1] != 4 * params.filters
        || cache.peephole_mismatch(params)
    {
        return Err(Error::Backward("convlstm cache does not match these parameters".into()));
    }
    let s = cache.c.shape();
    let (n, f, plane) = (s[0], s[1], s[2] * s[3]);
    let block = f * plane;
    let one = T::one();
    let peep = params.peephole.as_ref().map(|p| p.data());

    let gates = cache.gates.data();
    let c_prev = cache.c_prev.data();
    let c = cache.c.data();
    let tc = cache.tanh_c.data();
    let (dh, dc) = (dh.data(), dc.data());

    let mut dpre = vec![T::zero(); n * 4 * block];
    let mut dc_prev = vec![T::zero(); n * block];
    let mut dpeep = peep.map(|_| vec![T::zero(); 3 * block]);
    for b in 0..n {
        let g = &gates[b * 4 * block..(b + 1) * 4 * block];
        let dp = &mut dpre[b * 4 * block..(b + 1) * 4 * block];
        for j in 0..block {
            let k = b * block + j;
            let (ig, fg, cand, og) = (g[j], g[block + j], g[2 * block + j], g[3 * block + j]);
            let d_o = dh[k] * tc[k] * og * (one - og);
            let mut d_c = dc[k] + dh[k] * og * (one - tc[k] * tc[k]);
            if let Some(pw) = peep {
                d_c += d_o * pw[2 * block + j];
            }
            let d_i = d_c * cand * ig * (one - ig);
            let d_f = d_c * c_prev[k] * fg * (one - fg);
            let d_g = d_c * ig * (one - cand * cand);
            dp[j] = d_i;
            dp[block + j] = d_f;
            dp[2 * block + j] = d_g;
            dp[3 * block + j] = d_o;
            let mut dcp = d_c * fg;
            if let (Some(pw), Some(dpw)) = (peep, dpeep.as_mut()) {
                dcp += d_i * pw[j] + d_f * pw[block + j];
                dpw[j] += d_i * c_prev[k];
                dpw[block + j] += d_f * c_prev[k];
                dpw[2 * block + j] += d_o * c[k];
            }
            dc_prev[k] = dcp;
        }
    }
    let dpre = Tensor::from_parts(cache.gates.shape().to_vec(), dpre);
    let gx = conv2d_backward(&cache.x, &params.input_spec, &params.input_kernels, &dpre)?;
    let gh = conv2d_backward(&cache.h_prev, &params.recurrent_spec, &params.recurrent_kernels, &dpre)?;
    Ok(CellGrads {
        dx: gx.d_input,
        d_state_prev: ConvLstmState {
            h: gh.d_input,
            c: Tensor::from_parts(s.to_vec(), dc_prev),
        },
        params: ConvLstmGrads {
            input_kernels: gx.d_kernels,
            recurrent_kernels: gh.d_kernels,
            bias: gx.d_bias,
            peephole: dpeep.map(|d| Tensor::from_parts(vec![3 * f, s[2], s[3]], d)),
        },
    })
}

impl<T: Scalar> CellCache<T> {
    fn peephole_mismatch(&self, params: &ConvLstmParams<T>) -> bool {
        match &params.peephole {
            Some(p) => p.shape()[1..] != self.c.shape()[2..],
            None => false,
        }
    }
}

/// Per-timestep caches of an unrolled layer.
#[derive(Debug, Clone)]
pub struct LayerCache<T> {
    cells: Vec<CellCache<T>>,
}

impl<T> LayerCache<T> {
    pub fn steps(&self) -> usize {
        self.cells.len()
    }
}

/// Unrolls the cell over `seq` (`[N, T, C_in, h, w]`) and returns every
/// timestep's hidden state as `[N, T, F, h, w]`.
pub fn convlstm_layer_forward<T: Scalar>(
    seq: &Tensor<T>,
    params: &ConvLstmParams<T>,
    initial: Option<&ConvLstmState<T>>,
) -> Result<(Tensor<T>, ConvLstmState<T>, LayerCache<T>)> {
    if seq.rank() != 5 {
        return Err(Error::dim("convlstm layer", "sequence rank", 5, seq.rank()));
    }
    let s = seq.shape();
    let mut state = match initial {
        Some(st) => st.clone(),
        None => ConvLstmState::zeros(s[0], params.filters, s[3], s[4]),
    };
    let mut hidden = Vec::with_capacity(s[1]);
    let mut cells = Vec::with_capacity(s[1]);
    for t in 0..s[1] {
        let (next, cache) = convlstm_cell_forward(&seq.time_slice(t), &state, params)?;
        hidden.push(next.h.clone());
        cells.push(cache);
        state = next;
    }
    Ok((Tensor::stack_time(&hidden), state, LayerCache { cells }))
}

#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub d_seq: Tensor<T>,
    pub d_initial: ConvLstmState<T>,
    pub params: ConvLstmGrads<T>,
}

/// Backpropagation through time over an unrolled layer. `d_final` carries
/// gradient arriving at the final state, if any.
pub fn convlstm_layer_backward<T: Scalar>(
    cache: &LayerCache<T>,
    params: &ConvLstmParams<T>,
    d_hidden: &Tensor<T>,
    d_final: Option<&ConvLstmState<T>>,
) -> Result<LayerGrads<T>> {
    let steps = cache.cells.len();
    let state_shape = cache.cells[0].c.shape().to_vec();
    let want = [state_shape[0], steps, state_shape[1], state_shape[2], state_shape[3]];
    if d_hidden.shape() != want {
        return Err(Error::Backward(format!(
            "convlstm layer cache expects upstream {want:?}, got {:?}",
            d_hidden.shape()
        )));
    }
    let (mut dh_next, mut dc_next) = match d_final {
        Some(d) => (d.h.clone(), d.c.clone()),
        None => (Tensor::zeros(&state_shape), Tensor::zeros(&state_shape)),
    };
    let mut grads = ConvLstmGrads::zeros_like(params);
    let mut dxs = vec![None; steps];
    for t in (0..steps).rev() {
        let mut dh = d_hidden.time_slice(t);
        dh.add_assign(&dh_next);
        let g = convlstm_cell_backward(&cache.cells[t], params, &dh, &dc_next)?;
        grads.accumulate(&g.params);
        dxs[t] = Some(g.dx);
        dh_next = g.d_state_prev.h;
        dc_next = g.d_state_prev.c;
    }
    let dxs: Vec<Tensor<T>> = dxs.into_iter().map(Option::unwrap).collect();
    Ok(LayerGrads {
        d_seq: Tensor::stack_time(&dxs),
        d_initial: ConvLstmState { h: dh_next, c: dc_next },
        params: grads,
    })
}
