//! Synthetic radar sequences: Gaussian blobs drifting at constant velocity.
//!
//! Boundary rule: blobs are clipped at the frame edge, never wrapped. Start
//! positions are drawn so the blob centre stays at least one radius inside
//! the frame for the whole window. When the trajectory is longer than the
//! frame allows, the start is drawn so the path is centred on the frame, the
//! blob leaves the frame part-way, and the sample carries a warning.

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::frame::{FrameSource, RadarFrame};
use crate::data::sequence::{SequenceLayout, SequenceSample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Velocity {
    /// Pixels per frame, `vx` to the right and `vy` downwards.
    Fixed { vx: f64, vy: f64 },
    /// Same speed for every blob, direction drawn uniformly.
    RandomDirection { speed: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    pub blobs: usize,
    /// Peak amplitude range, within (0, 1].
    pub amplitude: (f64, f64),
    /// Gaussian standard deviation range in pixels.
    pub radius: (f64, f64),
    pub velocity: Velocity,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub layout: SequenceLayout,
    pub start: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            frame_h: 16,
            frame_w: 16,
            blobs: 1,
            amplitude: (0.6, 1.0),
            radius: (1.5, 2.5),
            velocity: Velocity::Fixed { vx: 1.0, vy: 0.0 },
            noise: 0.0,
            seed: 0,
            layout: SequenceLayout::default(),
            start: DateTime::<Utc>::from_timestamp(1_640_995_200, 0).expect("valid"),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.frame_h == 0 || self.frame_w == 0 || self.blobs == 0 {
            return bad("frame size and blob count must be >= 1");
        }
        let (a0, a1) = self.amplitude;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return bad("amplitude range must lie in (0, 1]");
        }
        let (r0, r1) = self.radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad("radius range must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be >= 0");
        }
        if self.layout.input_frames == 0 || self.layout.output_frames == 0 {
            return bad("layout needs input and output frames");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    amp: f64,
    sigma: f64,
}

/// Draws a start coordinate so that `start + v·steps` stays within
/// `[margin, len - 1 - margin]`. Returns the start and whether it had to
/// give up on containment.
fn place<R: Rng>(len: usize, v: f64, steps: f64, margin: f64, rng: &mut R) -> (f64, bool) {
    let hi = len as f64 - 1.0;
    let travel = v * steps;
    let lo_start = margin - travel.min(0.0);
    let hi_start = hi - margin - travel.max(0.0);
    if lo_start <= hi_start {
        (rng.random_range(lo_start..=hi_start), false)
    } else {
        ((hi - travel) / 2.0, true)
    }
}

fn render(blobs: &[Blob], t: f64, h: usize, w: usize) -> Vec<f64> {
    let mut px = vec![0.0f64; h * w];
    for b in blobs {
        let (cx, cy) = (b.cx + b.vx * t, b.cy + b.vy * t);
        let inv = 1.0 / (2.0 * b.sigma * b.sigma);
        for y in 0..h {
            let dy = y as f64 - cy;
            for x in 0..w {
                let dx = x as f64 - cx;
                px[y * w + x] += b.amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }
    px
}

/// Generates `n_sequences` samples. Sequence `k` occupies its own
/// non-overlapping time window and draws from its own random stream, so
/// output is reproducible per seed and independent of `n_sequences`.
pub fn synth_advection(cfg: &SynthConfig, n_sequences: usize) -> Result<Vec<SequenceSample>> {
    cfg.validate()?;
    let window = cfg.layout.window();
    let steps = (window - 1) as f64;
    let noise = (cfg.noise > 0.0).then(|| Normal::new(0.0, cfg.noise).expect("validated"));
    let (h, w) = (cfg.frame_h, cfg.frame_w);
    let mut out = Vec::with_capacity(n_sequences);
    for k in 0..n_sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(k as u64);
        let mut exits = false;
        let blobs: Vec<Blob> = (0..cfg.blobs)
            .map(|_| {
                let amp = rng.random_range(cfg.amplitude.0..=cfg.amplitude.1);
                let sigma = rng.random_range(cfg.radius.0..=cfg.radius.1);
                let (vx, vy) = match cfg.velocity {
                    Velocity::Fixed { vx, vy } => (vx, vy),
                    Velocity::RandomDirection { speed } => {
                        let a = rng.random_range(0.0..std::f64::consts::TAU);
                        (speed * a.cos(), speed * a.sin())
                    }
                };
                let (cx, ex) = place(w, vx, steps, sigma, &mut rng);
                let (cy, ey) = place(h, vy, steps, sigma, &mut rng);
                // A clipped start only matters if the centre actually leaves.
                let leaves = |c: f64, v: f64, len: usize| {
                    let end = c + v * steps;
                    c.min(end) < 0.0 || c.max(end) > len as f64 - 1.0
                };
                exits |= (ex && leaves(cx, vx, w)) || (ey && leaves(cy, vy, h));
                Blob {
                    cx,
                    cy,
                    vx,
                    vy,
                    amp,
                    sigma,
                }
            })
            .collect();
        let t0 = cfg.start + cfg.layout.cadence * (k * window) as i32;
        let mut frames = Vec::with_capacity(window);
        for t in 0..window {
            let mut px = render(&blobs, t as f64, h, w);
            for v in px.iter_mut() {
                *v = v.min(1.0);
                if let Some(n) = &noise {
                    *v += n.sample(&mut rng);
                }
            }
            let px = px.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
            let ts = t0 + cfg.layout.cadence * t as i32;
            frames.push(RadarFrame::from_pixels(ts, h, w, px, FrameSource::Synthetic)?);
        }
        let targets = frames.split_off(cfg.layout.input_frames);
        let mut sample = SequenceSample::new(format!("synth-{k:04}"), frames, targets)?;
        if exits {
            sample.warning = Some(format!("blob leaves the frame within {window} frames"));
        }
        out.push(sample);
    }
    Ok(out)
}

/// Timestamp of the first frame of synthetic sequence `k`.
pub fn sequence_start(cfg: &SynthConfig, k: usize) -> DateTime<Utc> {
    cfg.start + cfg.layout.cadence * (k * cfg.layout.window()) as i32
}
