//! Independent oracles and gradient-check drivers shared by the integration
//! tests and the acceptance harness. Nothing here calls the library's own
//! reference paths for the quantity being checked.
#![allow(dead_code)]

use nowcast::data::{synth_advection, SequenceSample, SynthConfig, Velocity};
use nowcast::layers::{
    batchnorm_backward, batchnorm_forward, convlstm_cell_backward, convlstm_cell_forward, output_head_backward,
    output_head_forward, BatchNormParams, ConvLstmParams, ConvLstmState, HeadParams, Mode,
};
use nowcast::model::{build_model, predict, train_step, ModelParams};
use nowcast::optim::{bce_loss, relative_error, AdadeltaConfig, OptimState};
use nowcast::{conv2d_backward, conv2d_forward, ArchitectureConfig, BlockConfig, ConvSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Finite-difference step for the smooth per-layer f64 checks.
pub const FD_STEP: f64 = 1e-3;

/// Step for the whole-model check. LeakyReLU has a kink at 0 and a wide
/// stencil that straddles it is biased, so this one stays small.
pub const MODEL_FD_STEP: f64 = 1e-4;

/// Fourth-order central difference of `f` at 0. Truncation error is
/// O(h⁴), so the step can stay large enough that rounding does not swamp
/// gradients near 1e-7.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, r)
}

/// `Σ w·v`, the scalar objective used to project a tensor output.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Max relative error of `analytic` against central differences of `f` at
/// every element of `x`.
pub fn check_all(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, analytic: &Tensor<f64>) -> f64 {
    assert_eq!(x.shape(), analytic.shape(), "gradient shape");
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let x0 = x.data()[i];
        let numeric = central_diff(
            |d| {
                probe.set(i, x0 + d).unwrap();
                f(&probe)
            },
            FD_STEP,
        );
        probe.set(i, x0).unwrap();
        worst = worst.max(relative_error(numeric, analytic.data()[i]));
    }
    worst
}

// ---------------------------------------------------------------------------
// Forward oracles.

/// Quadruple-loop same-padded stride-1 cross-correlation over NCHW data.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    (n, cin, h, w): (usize, usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
) -> Vec<f64> {
    let (ph, pw) = ((kh / 2) as i64, (kw / 2) as i64);
    let mut out = vec![0.0; n * cout * h * w];
    for b in 0..n {
        for o in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for u in 0..kh {
                            for v in 0..kw {
                                let sy = y as i64 + u as i64 - ph;
                                let sx = xx as i64 + v as i64 - pw;
                                if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                    continue;
                                }
                                let xi = ((b * cin + c) * h + sy as usize) * w + sx as usize;
                                let ki = ((o * cin + c) * kh + u) * kw + v;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * cout + o) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    out
}

/// One randomized conv case; returns max |library − oracle|.
pub fn conv_oracle_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
    let (h, w) = (r.random_range(1..=9), r.random_range(1..=9));
    let odd = |r: &mut ChaCha8Rng| [1, 3, 5][r.random_range(0..3)];
    let (kh, kw) = (odd(&mut r), odd(&mut r));
    let x = uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
    let k = uniform(&[cout, cin, kh, kw], -1.0, 1.0, &mut r);
    let b = uniform(&[cout], -1.0, 1.0, &mut r);
    let spec = ConvSpec::new(cin, cout, kh, kw).unwrap();
    let got = conv2d_forward(&x, &spec, &k, &b).unwrap();
    let want = naive_conv2d(x.data(), (n, cin, h, w), k.data(), (cout, kh, kw), b.data());
    assert_eq!(got.len(), want.len());
    got.data()
        .iter()
        .zip(&want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn sigm(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Straight-line ConvLSTM step:
///
/// ```text
/// i = σ(Wxi*x + Whi*h + wci∘c + bi)
/// f = σ(Wxf*x + Whf*h + wcf∘c + bf)
/// c' = f∘c + i∘tanh(Wxc*x + Whc*h + bc)
/// o = σ(Wxo*x + Who*h + wco∘c' + bo)
/// h' = o∘tanh(c')
/// ```
///
/// Each gate is an independent naive convolution with its own kernel slice.
pub fn cell_oracle(
    x: &Tensor<f64>,
    h_prev: &Tensor<f64>,
    c_prev: &Tensor<f64>,
    p: &ConvLstmParams<f64>,
) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (n, cin, hh, ww) = (s[0], s[1], s[2], s[3]);
    let f = p.filters();
    let k = p.kernel_size();
    let plane = hh * ww;
    let gate = |g: usize| -> Vec<f64> {
        let slice = |t: &Tensor<f64>, ch: usize| t.data()[g * f * ch * k * k..(g + 1) * f * ch * k * k].to_vec();
        let bx = p.bias.data()[g * f..(g + 1) * f].to_vec();
        let ax = naive_conv2d(
            x.data(),
            (n, cin, hh, ww),
            &slice(&p.input_kernels, cin),
            (f, k, k),
            &bx,
        );
        let ah = naive_conv2d(
            h_prev.data(),
            (n, f, hh, ww),
            &slice(&p.recurrent_kernels, f),
            (f, k, k),
            &vec![0.0; f],
        );
        ax.iter().zip(&ah).map(|(a, b)| a + b).collect()
    };
    let (zi, zf, zc, zo) = (gate(0), gate(1), gate(2), gate(3));
    let peep = |g: usize, idx: usize| -> f64 {
        match &p.peephole {
            Some(w) => w.data()[g * f * plane + idx % (f * plane)],
            None => 0.0,
        }
    };
    let cp = c_prev.data();
    let mut h_new = vec![0.0; n * f * plane];
    let mut c_new = vec![0.0; n * f * plane];
    for idx in 0..n * f * plane {
        let i = sigm(zi[idx] + peep(0, idx) * cp[idx]);
        let fg = sigm(zf[idx] + peep(1, idx) * cp[idx]);
        let c = fg * cp[idx] + i * zc[idx].tanh();
        let o = sigm(zo[idx] + peep(2, idx) * c);
        c_new[idx] = c;
        h_new[idx] = o * c.tanh();
    }
    (h_new, c_new)
}

pub fn random_cell(
    r: &mut ChaCha8Rng,
    cin: usize,
    f: usize,
    k: usize,
    hw: (usize, usize),
    peephole: bool,
) -> ConvLstmParams<f64> {
    let mut p = ConvLstmParams::<f64>::zeros(cin, f, k, peephole.then_some(hw)).unwrap();
    p.input_kernels = uniform(p.input_kernels.shape(), -0.5, 0.5, r);
    p.recurrent_kernels = uniform(p.recurrent_kernels.shape(), -0.5, 0.5, r);
    p.bias = uniform(p.bias.shape(), -0.5, 0.5, r);
    if let Some(pp) = &mut p.peephole {
        *pp = uniform(pp.shape(), -0.5, 0.5, r);
    }
    p
}

pub struct CellCase {
    pub x: Tensor<f64>,
    pub state: ConvLstmState<f64>,
    pub params: ConvLstmParams<f64>,
}

pub fn cell_case(seed: u64, peephole: bool) -> CellCase {
    let mut r = rng(seed);
    let (n, cin, f) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
    let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
    let k = [1, 3, 5][r.random_range(0..3)];
    let params = random_cell(&mut r, cin, f, k, (h, w), peephole);
    CellCase {
        x: uniform(&[n, cin, h, w], -1.0, 1.0, &mut r),
        state: ConvLstmState {
            h: uniform(&[n, f, h, w], -1.0, 1.0, &mut r),
            c: uniform(&[n, f, h, w], -1.5, 1.5, &mut r),
        },
        params,
    }
}

/// One randomized cell case; returns max |library − oracle| over H and C.
pub fn cell_oracle_case(seed: u64, peephole: bool) -> f64 {
    let c = cell_case(seed, peephole);
    let (next, _) = convlstm_cell_forward(&c.x, &c.state, &c.params).unwrap();
    let (h, cc) = cell_oracle(&c.x, &c.state.h, &c.state.c, &c.params);
    assert_eq!((next.h.len(), next.c.len()), (h.len(), cc.len()));
    let dh = next.h.data().iter().zip(&h).map(|(a, b)| (a - b).abs());
    let dc = next.c.data().iter().zip(&cc).map(|(a, b)| (a - b).abs());
    dh.chain(dc).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Per-layer gradient checks. Each projects the layer output onto a random
// direction and compares every analytic gradient element against central
// differences. Spatial ≤ 8×8, channels ≤ 4, all in f64.

pub fn conv_gradcheck(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..=2), r.random_range(1..=4), r.random_range(1..=4));
    let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
    let k = [1, 3, 5][r.random_range(0..3)];
    let spec = ConvSpec::square(cin, cout, k).unwrap();
    let x = uniform(&[n, cin, h, w], -1.0, 1.0, &mut r);
    let kern = uniform(&spec.kernel_shape(), -1.0, 1.0, &mut r);
    let b = uniform(&[cout], -1.0, 1.0, &mut r);
    let proj = uniform(&[n, cout, h, w], -1.0, 1.0, &mut r);
    let g = conv2d_backward(&x, &spec, &kern, &proj).unwrap();
    let e1 = check_all(
        |t| dot(&conv2d_forward(t, &spec, &kern, &b).unwrap(), &proj),
        &x,
        &g.d_input,
    );
    let e2 = check_all(
        |t| dot(&conv2d_forward(&x, &spec, t, &b).unwrap(), &proj),
        &kern,
        &g.d_kernels,
    );
    let e3 = check_all(
        |t| dot(&conv2d_forward(&x, &spec, &kern, t).unwrap(), &proj),
        &b,
        &g.d_bias,
    );
    e1.max(e2).max(e3)
}

pub fn cell_gradcheck(seed: u64, peephole: bool) -> f64 {
    let c = cell_case(seed, peephole);
    let mut r = rng(seed ^ 0x5eed);
    let shape = c.state.h.shape().to_vec();
    let (ph, pc) = (uniform(&shape, -1.0, 1.0, &mut r), uniform(&shape, -1.0, 1.0, &mut r));
    let objective = |x: &Tensor<f64>, st: &ConvLstmState<f64>, p: &ConvLstmParams<f64>| {
        let (next, _) = convlstm_cell_forward(x, st, p).unwrap();
        dot(&next.h, &ph) + dot(&next.c, &pc)
    };
    let (_, cache) = convlstm_cell_forward(&c.x, &c.state, &c.params).unwrap();
    let g = convlstm_cell_backward(&cache, &c.params, &ph, &pc).unwrap();
    let mut worst = check_all(|t| objective(t, &c.state, &c.params), &c.x, &g.dx);
    worst = worst.max(check_all(
        |t| {
            objective(
                &c.x,
                &ConvLstmState {
                    h: t.clone(),
                    c: c.state.c.clone(),
                },
                &c.params,
            )
        },
        &c.state.h,
        &g.d_state_prev.h,
    ));
    worst = worst.max(check_all(
        |t| {
            objective(
                &c.x,
                &ConvLstmState {
                    h: c.state.h.clone(),
                    c: t.clone(),
                },
                &c.params,
            )
        },
        &c.state.c,
        &g.d_state_prev.c,
    ));
    let with = |edit: &dyn Fn(&mut ConvLstmParams<f64>, &Tensor<f64>), t: &Tensor<f64>| {
        let mut p = c.params.clone();
        edit(&mut p, t);
        objective(&c.x, &c.state, &p)
    };
    worst = worst.max(check_all(
        |t| with(&|p, t| p.input_kernels = t.clone(), t),
        &c.params.input_kernels,
        &g.params.input_kernels,
    ));
    worst = worst.max(check_all(
        |t| with(&|p, t| p.recurrent_kernels = t.clone(), t),
        &c.params.recurrent_kernels,
        &g.params.recurrent_kernels,
    ));
    worst = worst.max(check_all(
        |t| with(&|p, t| p.bias = t.clone(), t),
        &c.params.bias,
        &g.params.bias,
    ));
    if let (Some(pp), Some(gp)) = (&c.params.peephole, &g.params.peephole) {
        worst = worst.max(check_all(|t| with(&|p, t| p.peephole = Some(t.clone()), t), pp, gp));
    }
    worst
}

pub fn batchnorm_gradcheck(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, t, c) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4));
    let (h, w) = (r.random_range(2..=8), r.random_range(2..=8));
    let mut p = BatchNormParams::<f64>::new(c, 1e-3, 0.99).unwrap();
    p.gamma = uniform(&[c], 0.5, 1.5, &mut r);
    p.beta = uniform(&[c], -0.5, 0.5, &mut r);
    let x = uniform(&[n, t, c, h, w], -1.0, 1.0, &mut r);
    let proj = uniform(x.shape(), -1.0, 1.0, &mut r);
    let obj = |x: &Tensor<f64>, p: &BatchNormParams<f64>| dot(&batchnorm_forward(x, p, Mode::Train).unwrap().0, &proj);
    let (_, cache) = batchnorm_forward(&x, &p, Mode::Train).unwrap();
    let g = batchnorm_backward(&cache, &proj).unwrap();
    let e1 = check_all(|t| obj(t, &p), &x, &g.dx);
    let e2 = check_all(
        |t| {
            let mut q = p.clone();
            q.gamma = t.clone();
            obj(&x, &q)
        },
        &p.gamma,
        &g.dgamma,
    );
    let e3 = check_all(
        |t| {
            let mut q = p.clone();
            q.beta = t.clone();
            obj(&x, &q)
        },
        &p.beta,
        &g.dbeta,
    );
    e1.max(e2).max(e3)
}

pub fn head_gradcheck(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, t, f) = (r.random_range(1..=2), r.random_range(1..=3), r.random_range(1..=4));
    let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
    let k = [1, 3, 5][r.random_range(0..3)];
    let mut head = HeadParams::<f64>::zeros(f, k).unwrap();
    head.kernels = uniform(head.kernels.shape(), -0.5, 0.5, &mut r);
    head.bias = uniform(&[1], -0.5, 0.5, &mut r);
    let x = uniform(&[n, t, f, h, w], -1.0, 1.0, &mut r);
    let proj = uniform(&[n, t, 1, h, w], -1.0, 1.0, &mut r);
    let obj = |x: &Tensor<f64>, hp: &HeadParams<f64>| dot(&output_head_forward(x, hp).unwrap().0, &proj);
    let (_, cache) = output_head_forward(&x, &head).unwrap();
    let g = output_head_backward(&cache, &head, &proj).unwrap();
    let e1 = check_all(|t| obj(t, &head), &x, &g.d_hidden);
    let e2 = check_all(
        |t| {
            let mut q = head.clone();
            q.kernels = t.clone();
            obj(&x, &q)
        },
        &head.kernels,
        &g.kernels,
    );
    let e3 = check_all(
        |t| {
            let mut q = head.clone();
            q.bias = t.clone();
            obj(&x, &q)
        },
        &head.bias,
        &g.bias,
    );
    e1.max(e2).max(e3)
}

pub fn bce_gradcheck(seed: u64) -> f64 {
    let mut r = rng(seed);
    let shape = [r.random_range(1..=4), r.random_range(1..=8), r.random_range(1..=8)];
    let pred = uniform(&shape, 0.05, 0.95, &mut r);
    let target = uniform(&shape, 0.0, 1.0, &mut r);
    let g = bce_loss(&pred, &target).unwrap().gradient;
    check_all(|t| bce_loss(t, &target).unwrap().value, &pred, &g)
}

/// Tiny two-block model with BN and LeakyReLU in the path.
pub fn tiny_arch(peephole: bool) -> ArchitectureConfig {
    ArchitectureConfig {
        input_frames: 3,
        output_frames: 3,
        frame_h: 6,
        frame_w: 5,
        blocks: vec![
            BlockConfig {
                filters: 3,
                kernel_size: 3,
            },
            BlockConfig {
                filters: 2,
                kernel_size: 3,
            },
        ],
        strict_arch: false,
        peephole,
        ..Default::default()
    }
}

/// Full-model check on `samples` parameters drawn uniformly across every
/// trainable tensor; returns the worst relative error.
pub fn model_gradcheck(seed: u64, samples: usize) -> f64 {
    let arch = tiny_arch(true);
    let mut r = rng(seed);
    let mut params = build_model::<f64>(&arch, seed).unwrap();
    // Non-trivial peepholes and BN affine parameters.
    for (_, t) in params.trainable_mut() {
        let noise = uniform(t.shape(), -0.3, 0.3, &mut r);
        *t = t.zip_map(&noise, "perturb", |a, b| a + b).unwrap();
    }
    let shape = [2, arch.training_steps(), 1, arch.frame_h, arch.frame_w];
    let x = uniform(&shape, 0.0, 1.0, &mut r);
    let y = uniform(&shape, 0.0, 1.0, &mut r);
    let loss = |p: &ModelParams<f64>| {
        let (out, _) = p.forward(&x, Mode::Train).unwrap();
        bce_loss(&out, &y).unwrap().value
    };
    let (out, cache) = params.forward(&x, Mode::Train).unwrap();
    let d = bce_loss(&out, &y).unwrap().gradient;
    let grads = params.backward(&cache, &d).unwrap();
    let named: Vec<(String, Tensor<f64>)> = grads.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let total: usize = named.iter().map(|(_, t)| t.len()).sum();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = r.random_range(0..total);
        let slot = named
            .iter()
            .position(|(_, t)| {
                if flat < t.len() {
                    true
                } else {
                    flat -= t.len();
                    false
                }
            })
            .unwrap();
        let eval = |delta: f64| {
            let mut q = params.clone();
            let (_, t) = q.trainable_mut().into_iter().nth(slot).unwrap();
            let v = t.data()[flat];
            t.set(flat, v + delta).unwrap();
            loss(&q)
        };
        let numeric = central_diff(eval, MODEL_FD_STEP);
        worst = worst.max(relative_error(numeric, named[slot].1.data()[flat]));
    }
    worst
}

// ---------------------------------------------------------------------------
// Desk-scale training fixtures.

pub const DESK_STEPS: usize = 300;
pub const DESK_SEQUENCES: usize = 16;

/// One Gaussian blob moving one pixel per frame to the right. The blob is
/// small enough that its 11-pixel path stays inside a 16-pixel frame.
pub fn advection_config(seed: u64) -> SynthConfig {
    SynthConfig {
        radius: (1.0, 2.0),
        velocity: Velocity::Fixed { vx: 1.0, vy: 0.0 },
        seed,
        layout: nowcast::data::SequenceLayout {
            input_frames: 6,
            output_frames: 6,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct DeskRun {
    pub params: ModelParams<f32>,
    pub train: Vec<SequenceSample>,
    pub losses: Vec<f64>,
}

/// Trains the desk configuration for `steps` single-sample steps cycling
/// through the training set.
pub fn desk_train(seed: u64, steps: usize) -> DeskRun {
    let train = synth_advection(&advection_config(seed), DESK_SEQUENCES).unwrap();
    let mut params = build_model::<f32>(&ArchitectureConfig::desk_scale(), seed).unwrap();
    let mut opt = OptimState::new(AdadeltaConfig::desk_scale(), params.trainable());
    let losses = (0..steps)
        .map(|s| {
            let k = s % train.len();
            train_step(&mut params, &mut opt, &train[k..k + 1]).unwrap()
        })
        .collect();
    DeskRun { params, train, losses }
}

pub fn forecast(params: &ModelParams<f32>, s: &SequenceSample) -> Tensor<f32> {
    let x = s.input_tensor::<f32>();
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let y = predict(params, &x.reshape(&shape).unwrap()).unwrap();
    y.reshape(&y.shape()[1..]).unwrap()
}

/// Intensity-weighted centre `(x, y)` of one `h×w` plane.
pub fn center_of_mass(px: &[f32], h: usize, w: usize) -> (f64, f64) {
    let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = px[y * w + x] as f64;
            m += v;
            sx += v * x as f64;
            sy += v * y as f64;
        }
    }
    (sx / m, sy / m)
}

/// Angle in degrees between two displacement vectors.
pub fn angle_deg(a: (f64, f64), b: (f64, f64)) -> f64 {
    let dot = a.0 * b.0 + a.1 * b.1;
    let na = (a.0 * a.0 + a.1 * a.1).sqrt();
    let nb = (b.0 * b.0 + b.1 * b.1).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 180.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Whether the forecast's centre of mass moves from lead 1 to lead 6 within
/// 45° of the true displacement.
pub fn motion_within_45(params: &ModelParams<f32>, s: &SequenceSample) -> bool {
    let (h, w) = s.frame_dims();
    let y = forecast(params, s);
    let plane = h * w;
    let last = s.targets.len() - 1;
    let p0 = center_of_mass(&y.data()[..plane], h, w);
    let p1 = center_of_mass(&y.data()[last * plane..(last + 1) * plane], h, w);
    let t0 = center_of_mass(s.targets[0].pixels(), h, w);
    let t1 = center_of_mass(s.targets[last].pixels(), h, w);
    angle_deg((p1.0 - p0.0, p1.1 - p0.1), (t1.0 - t0.0, t1.1 - t0.1)) <= 45.0
}
