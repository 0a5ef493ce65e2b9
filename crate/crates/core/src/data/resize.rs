//! Area-weighted (box filter) downsizing.

use crate::data::frame::RadarFrame;
use crate::error::{Error, Result};

/// Sparse 1-D weights: output position → (source index, weight) pairs
/// summing to one.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = (i + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(src);
            (first..last)
                .filter_map(|s| {
                    let overlap = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                    (overlap > 0.0).then_some((s, overlap / scale))
                })
                .collect()
        })
        .collect()
}

/// Resizes by averaging every source pixel over the fraction of its area
/// that falls inside each output cell. Only downsizing is supported.
pub fn resize_area(frame: &RadarFrame, out_h: usize, out_w: usize) -> Result<RadarFrame> {
    let (h, w) = (frame.height(), frame.width());
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidConfig(format!(
            "resize target {out_h}x{out_w} has a zero dimension"
        )));
    }
    if out_h > h || out_w > w {
        return Err(Error::InvalidConfig(format!(
            "resize_area only downsizes: {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let wy = area_weights(h, out_h);
    let wx = area_weights(w, out_w);
    let src = frame.pixels();
    let (lo, hi) = src
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));

    // Rows first, then columns.
    let mut rows = vec![0.0f64; out_h * w];
    for (oy, taps) in wy.iter().enumerate() {
        for &(sy, wgt) in taps {
            for x in 0..w {
                rows[oy * w + x] += wgt * src[sy * w + x] as f64;
            }
        }
    }
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        for taps in &wx {
            let v: f64 = taps.iter().map(|&(sx, wgt)| wgt * rows[oy * w + sx]).sum();
            out.push((v as f32).clamp(lo, hi));
        }
    }
    RadarFrame::from_pixels(frame.timestamp, out_h, out_w, out, frame.source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::frame::FrameSource;
    use chrono::{DateTime, Utc};

    fn frame(h: usize, w: usize, px: Vec<f32>) -> RadarFrame {
        RadarFrame::from_pixels(
            DateTime::<Utc>::from_timestamp(0, 0).unwrap(),
            h,
            w,
            px,
            FrameSource::File,
        )
        .unwrap()
    }

    #[test]
    fn weights_sum_to_one() {
        for (s, d) in [(765, 344), (760, 315), (7, 3), (5, 5)] {
            for taps in area_weights(s, d) {
                let total: f64 = taps.iter().map(|t| t.1).sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_frame_stays_constant() {
        let f = frame(9, 7, vec![0.37; 63]);
        for (oh, ow) in [(9, 7), (4, 3), (1, 1), (5, 6)] {
            let r = resize_area(&f, oh, ow).unwrap();
            assert!(r.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn two_to_one_block_means() {
        // 2x2 blocks: [[a a b b][a a b b][c c d d][c c d d]] with a varying
        // pattern inside each block.
        let px = vec![
            0.1, 0.3, 0.5, 0.7, //
            0.2, 0.4, 0.6, 0.8, //
            0.0, 1.0, 0.25, 0.25, //
            0.5, 0.5, 0.75, 0.25,
        ];
        let r = resize_area(&frame(4, 4, px), 2, 2).unwrap();
        let want = [0.25, 0.65, 0.5, 0.375];
        for (a, b) in r.pixels().iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_zero_and_upsizing() {
        let f = frame(2, 2, vec![0.0; 4]);
        assert!(resize_area(&f, 0, 1).is_err());
        assert!(resize_area(&f, 3, 2).is_err());
    }
}
