//! Viridis rendering of frames and truth/prediction comparisons.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::gif::{GifEncoder, Repeat};
use image::{Delay, Frame, Rgb, RgbImage, RgbaImage};

use crate::data::frame::RadarFrame;
use crate::error::{Error, Result};
use crate::viridis_lut::VIRIDIS;

pub const DEFAULT_GIF_DELAY_MS: u32 = 200;
/// Number of lead times in the strip layout.
pub const STRIP_PANELS: usize = 4;

const BACKGROUND: Rgb<u8> = Rgb([0, 0, 0]);
const INK: Rgb<u8> = Rgb([255, 255, 255]);
const GAP: u32 = 2;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;
const HEADER: u32 = GLYPH_H + 4;

/// Lookup-table entry `round(v·255)`, `v` clamped to [0, 1].
pub fn viridis(v: f32) -> Rgb<u8> {
    let i = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
    Rgb(VIRIDIS[i])
}

pub fn colorize(frame: &RadarFrame) -> RgbImage {
    let w = frame.width() as u32;
    let px = frame.pixels();
    RgbImage::from_fn(w, frame.height() as u32, |x, y| viridis(px[(y * w + x) as usize]))
}

fn save_png(img: &RgbImage, out: &Path) -> Result<()> {
    img.save_with_format(out, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out, io),
        other => other.into(),
    })
}

/// Writes an RGB PNG with the frame's dimensions.
pub fn render_frame(frame: &RadarFrame, out: &Path) -> Result<()> {
    save_png(&colorize(frame), out)
}

/// Rows of a 3×5 glyph, most significant of the low three bits leftmost.
fn glyph(c: char) -> [u8; 5] {
    match c {
        '0' => [7, 5, 5, 5, 7],
        '1' => [2, 6, 2, 2, 7],
        '2' => [7, 1, 7, 4, 7],
        '3' => [7, 1, 7, 1, 7],
        '4' => [5, 5, 7, 1, 1],
        '5' => [7, 4, 7, 1, 7],
        '6' => [7, 4, 7, 5, 7],
        '7' => [7, 1, 1, 1, 1],
        '8' => [7, 5, 7, 5, 7],
        '9' => [7, 5, 7, 1, 7],
        '+' => [0, 2, 7, 2, 0],
        'D' => [6, 5, 5, 5, 6],
        'E' => [7, 4, 6, 4, 7],
        'H' => [5, 5, 7, 5, 5],
        'M' => [5, 7, 7, 5, 5],
        'P' => [7, 5, 7, 4, 4],
        'R' => [6, 5, 6, 5, 5],
        'T' => [7, 2, 2, 2, 2],
        'U' => [5, 5, 5, 5, 7],
        _ => [0; 5],
    }
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to the image.
fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as u32 * (GLYPH_W + 1);
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W {
                if bits & (4 >> col) != 0 {
                    let (px, py) = (gx + col, y + row as u32);
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, INK);
                    }
                }
            }
        }
    }
}

fn blit_scaled(dst: &mut RgbImage, src: &RgbImage, x0: u32, y0: u32, scale: u32) {
    for (x, y, p) in src.enumerate_pixels() {
        for dy in 0..scale {
            for dx in 0..scale {
                dst.put_pixel(x0 + x * scale + dx, y0 + y * scale + dy, *p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOptions {
    pub gif_delay_ms: u32,
    /// Integer upscaling of each frame; 0 picks the smallest factor giving
    /// frames at least 64 pixels wide, so labels fit.
    pub scale: u32,
    /// Minutes between frames, used in the lead-time labels.
    pub cadence_minutes: u32,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            gif_delay_ms: DEFAULT_GIF_DELAY_MS,
            scale: 0,
            cadence_minutes: 5,
        }
    }
}

impl RenderOptions {
    fn scale_for(&self, width: usize) -> u32 {
        if self.scale > 0 {
            self.scale
        } else {
            (64u32).div_ceil(width as u32).max(1)
        }
    }
}

/// Geometry of a side-by-side panel: a label band on top, then the truth
/// frame on the left and the prediction on the right, separated by a gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PanelLayout {
    pub scale: u32,
    pub frame_w: u32,
    pub frame_h: u32,
    pub header: u32,
}

impl PanelLayout {
    pub fn width(&self) -> u32 {
        2 * self.frame_w * self.scale + GAP
    }
    pub fn height(&self) -> u32 {
        self.header + self.frame_h * self.scale
    }
    /// Top-left corners of the truth and prediction areas.
    pub fn truth_origin(&self) -> (u32, u32) {
        (0, self.header)
    }
    pub fn pred_origin(&self) -> (u32, u32) {
        (self.frame_w * self.scale + GAP, self.header)
    }
}

fn check_pair(pred: &[RadarFrame], truth: &[RadarFrame]) -> Result<(usize, usize)> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::dim("render_comparison", "frame count", truth.len(), pred.len()));
    }
    let dims = (truth[0].height(), truth[0].width());
    for f in pred.iter().chain(truth) {
        if (f.height(), f.width()) != dims {
            return Err(Error::shape(
                "render_comparison",
                &[f.height(), f.width()],
                &[dims.0, dims.1],
            ));
        }
    }
    Ok(dims)
}

fn lead_label(k: usize, opts: &RenderOptions) -> String {
    format!("+{}M", (k as u32 + 1) * opts.cadence_minutes)
}

fn panel(pred: &RadarFrame, truth: &RadarFrame, layout: &PanelLayout, lead: &str) -> RgbImage {
    let mut img = RgbImage::from_pixel(layout.width(), layout.height(), BACKGROUND);
    let (tx, ty) = layout.truth_origin();
    let (px, py) = layout.pred_origin();
    draw_text(&mut img, tx + 1, 2, "TRUTH");
    draw_text(&mut img, px + 1, 2, &format!("PRED {lead}"));
    blit_scaled(&mut img, &colorize(truth), tx, ty, layout.scale);
    blit_scaled(&mut img, &colorize(pred), px, py, layout.scale);
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonOutputs {
    pub panels: Vec<PathBuf>,
    pub gif: PathBuf,
    pub layout: PanelLayout,
}

/// Writes `panel_NN.png` for every timestep and `comparison.gif` with one
/// animation frame per timestep.
pub fn render_comparison(
    pred: &[RadarFrame],
    truth: &[RadarFrame],
    out_dir: &Path,
    opts: &RenderOptions,
) -> Result<ComparisonOutputs> {
    let (h, w) = check_pair(pred, truth)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let layout = PanelLayout {
        scale: opts.scale_for(w),
        frame_w: w as u32,
        frame_h: h as u32,
        header: HEADER,
    };
    let mut panels = Vec::with_capacity(pred.len());
    let mut frames = Vec::with_capacity(pred.len());
    let delay = Delay::from_numer_denom_ms(opts.gif_delay_ms, 1);
    for (k, (p, t)) in pred.iter().zip(truth).enumerate() {
        let img = panel(p, t, &layout, &lead_label(k, opts));
        let path = out_dir.join(format!("panel_{:02}.png", k + 1));
        save_png(&img, &path)?;
        panels.push(path);
        let rgba: RgbaImage = image::DynamicImage::ImageRgb8(img).into_rgba8();
        frames.push(Frame::from_parts(rgba, 0, 0, delay));
    }
    let gif = out_dir.join("comparison.gif");
    let file = File::create(&gif).map_err(|e| Error::io(&gif, e))?;
    let mut enc = GifEncoder::new(BufWriter::new(file));
    enc.set_repeat(Repeat::Infinite)?;
    enc.encode_frames(frames)?;
    Ok(ComparisonOutputs { panels, gif, layout })
}

/// Geometry of the strip: a label row, then a truth row above a prediction
/// row, one column per lead time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StripLayout {
    pub scale: u32,
    pub frame_w: u32,
    pub frame_h: u32,
    pub columns: u32,
    pub header: u32,
}

impl StripLayout {
    pub fn width(&self) -> u32 {
        self.columns * self.frame_w * self.scale + (self.columns - 1) * GAP
    }
    pub fn height(&self) -> u32 {
        self.header + 2 * self.frame_h * self.scale + GAP
    }
    /// Top-left corner of lead time `col` in row 0 (truth) or 1 (prediction).
    pub fn origin(&self, row: u32, col: u32) -> (u32, u32) {
        (
            col * (self.frame_w * self.scale + GAP),
            self.header + row * (self.frame_h * self.scale + GAP),
        )
    }
}

/// The first [`STRIP_PANELS`] lead times in one image: ground truth on the
/// top row, prediction on the bottom row.
pub fn render_strip(
    pred: &[RadarFrame],
    truth: &[RadarFrame],
    out: &Path,
    opts: &RenderOptions,
) -> Result<StripLayout> {
    let (h, w) = check_pair(pred, truth)?;
    if pred.len() < STRIP_PANELS {
        return Err(Error::dim("render_strip", "frame count", STRIP_PANELS, pred.len()));
    }
    let layout = StripLayout {
        scale: opts.scale_for(w),
        frame_w: w as u32,
        frame_h: h as u32,
        columns: STRIP_PANELS as u32,
        header: HEADER,
    };
    let mut img = RgbImage::from_pixel(layout.width(), layout.height(), BACKGROUND);
    for k in 0..STRIP_PANELS {
        let (x, _) = layout.origin(0, k as u32);
        draw_text(&mut img, x + 1, 2, &lead_label(k, opts));
        for (row, f) in [&truth[k], &pred[k]].into_iter().enumerate() {
            let (x, y) = layout.origin(row as u32, k as u32);
            blit_scaled(&mut img, &colorize(f), x, y, layout.scale);
        }
    }
    save_png(&img, out)?;
    Ok(layout)
}
