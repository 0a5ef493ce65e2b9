//! Radar frames and their on-disk encodings.
//!
//! The raw container is `RFRM`:
//!
//! | bytes | field |
//! |-------|-------|
//! | 4 | magic `RFRM` |
//! | 2 | version, u16 LE |
//! | 4 | height, u32 LE |
//! | 4 | width, u32 LE |
//! | 8 | timestamp, i64 LE UNIX seconds |
//! | 4·h·w | values, f32 LE row-major, each in [0, 1] |

use std::fmt;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Utc};

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const RFRM_MAGIC: [u8; 4] = *b"RFRM";
pub const RFRM_VERSION: u16 = 1;
const RFRM_HEADER: usize = 4 + 2 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameSource {
    Live,
    File,
    Synthetic,
}

impl fmt::Display for FrameSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FrameSource::Live => "live",
            FrameSource::File => "file",
            FrameSource::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameFormat {
    GrayPng8,
    RawF32,
}

impl FrameFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(FrameFormat::GrayPng8),
            "rfrm" => Some(FrameFormat::RawF32),
            _ => None,
        }
    }
}

/// One normalized single-channel reflectivity image.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame {
    pub timestamp: DateTime<Utc>,
    values: Tensor<f32>,
    pub source: FrameSource,
}

impl RadarFrame {
    /// `values` must be `[1, h, w]` with every entry in [0, 1].
    pub fn new(timestamp: DateTime<Utc>, values: Tensor<f32>, source: FrameSource) -> Result<Self> {
        if values.rank() != 3 || values.shape()[0] != 1 {
            return Err(Error::shape("radar frame", values.shape(), &[1, 0, 0]));
        }
        if let Some((i, v)) = values
            .data()
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= 0.0 && **v <= 1.0))
        {
            return Err(Error::OutOfRange(format!(
                "frame value {v} at index {i} outside [0, 1]"
            )));
        }
        Ok(RadarFrame {
            timestamp,
            values,
            source,
        })
    }

    pub fn from_pixels(
        timestamp: DateTime<Utc>,
        height: usize,
        width: usize,
        pixels: Vec<f32>,
        source: FrameSource,
    ) -> Result<Self> {
        Self::new(timestamp, Tensor::new(&[1, height, width], pixels)?, source)
    }

    pub fn values(&self) -> &Tensor<f32> {
        &self.values
    }

    pub fn pixels(&self) -> &[f32] {
        self.values.data()
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Identifier unique to this frame within a stream.
    pub fn key(&self) -> String {
        format!("{}@{}", self.source, self.timestamp.timestamp())
    }
}

fn epoch() -> DateTime<Utc> {
    DateTime::<Utc>::from_timestamp(0, 0).expect("epoch is representable")
}

/// Decodes a frame. PNG frames carry no time information and are stamped
/// with the UNIX epoch; see [`load_frame`] for filename timestamps.
pub fn decode_frame(bytes: &[u8], format: FrameFormat) -> Result<RadarFrame> {
    match format {
        FrameFormat::GrayPng8 => decode_png(bytes),
        FrameFormat::RawF32 => decode_rfrm(bytes),
    }
}

fn decode_png(bytes: &[u8]) -> Result<RadarFrame> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let gray = match img {
        image::DynamicImage::ImageLuma8(g) => g,
        other => {
            return Err(
                FormatError::Malformed(format!("PNG: expected 8-bit grayscale, found {:?}", other.color())).into(),
            )
        }
    };
    let (w, h) = gray.dimensions();
    let pixels = gray.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    RadarFrame::from_pixels(epoch(), h as usize, w as usize, pixels, FrameSource::File)
}

fn decode_rfrm(bytes: &[u8]) -> Result<RadarFrame> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated("RFRM magic".into()).into());
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != RFRM_MAGIC {
        return Err(FormatError::BadMagic {
            expected: RFRM_MAGIC,
            found: magic,
        }
        .into());
    }
    if bytes.len() < RFRM_HEADER {
        return Err(FormatError::Truncated("RFRM header".into()).into());
    }
    let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
    if version != RFRM_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: RFRM_VERSION,
        }
        .into());
    }
    let h = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let ts = i64::from_le_bytes(bytes[14..22].try_into().unwrap());
    if h == 0 || w == 0 {
        return Err(FormatError::Malformed(format!("RFRM dimensions {h}x{w}")).into());
    }
    let timestamp =
        DateTime::<Utc>::from_timestamp(ts, 0).ok_or_else(|| FormatError::Malformed(format!("RFRM timestamp {ts}")))?;
    let payload = &bytes[RFRM_HEADER..];
    let want = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| FormatError::Malformed(format!("RFRM dimensions {h}x{w}")))?;
    if payload.len() < want {
        return Err(FormatError::Truncated("RFRM payload".into()).into());
    }
    if payload.len() > want {
        return Err(FormatError::Malformed("RFRM trailing bytes after payload".into()).into());
    }
    let mut pixels = Vec::with_capacity(h * w);
    for (index, chunk) in payload.chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().unwrap());
        if !(0.0..=1.0).contains(&value) {
            return Err(FormatError::ValueOutOfRange { index, value }.into());
        }
        pixels.push(value);
    }
    RadarFrame::from_pixels(timestamp, h, w, pixels, FrameSource::File)
}

/// Serializes a frame as RFRM.
pub fn encode_frame(frame: &RadarFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(RFRM_HEADER + 4 * frame.pixels().len());
    out.extend_from_slice(&RFRM_MAGIC);
    out.extend_from_slice(&RFRM_VERSION.to_le_bytes());
    out.extend_from_slice(&(frame.height() as u32).to_le_bytes());
    out.extend_from_slice(&(frame.width() as u32).to_le_bytes());
    out.extend_from_slice(&frame.timestamp.timestamp().to_le_bytes());
    for v in frame.pixels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Encodes a frame as an 8-bit grayscale PNG (v → round(255·v)).
pub fn encode_gray_png(frame: &RadarFrame) -> Result<Vec<u8>> {
    let raw: Vec<u8> = frame.pixels().iter().map(|v| (v * 255.0).round() as u8).collect();
    let img =
        image::GrayImage::from_raw(frame.width() as u32, frame.height() as u32, raw).expect("buffer sized from frame");
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Reads a frame file, picking the format from its extension. PNG files take
/// their timestamp from the first run of 12 digits (`YYYYMMDDHHMM`) in the
/// file name when one is present.
pub fn load_frame(path: &Path) -> Result<RadarFrame> {
    let format = FrameFormat::from_path(path)
        .ok_or_else(|| FormatError::Malformed(format!("unknown frame extension: {}", path.display())))?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut frame = decode_frame(&bytes, format)?;
    if format == FrameFormat::GrayPng8 {
        if let Some(ts) = path.file_stem().and_then(|s| s.to_str()).and_then(timestamp_from_name) {
            frame.timestamp = ts;
        }
    }
    Ok(frame)
}

pub fn save_frame(frame: &RadarFrame, path: &Path) -> Result<()> {
    std::fs::write(path, encode_frame(frame)).map_err(|e| Error::io(path, e))
}

pub(crate) fn timestamp_from_name(name: &str) -> Option<DateTime<Utc>> {
    let bytes = name.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i - start >= 12 {
                let digits = &name[start..start + 12];
                if let Ok(t) = NaiveDateTime::parse_from_str(digits, "%Y%m%d%H%M") {
                    return Some(t.and_utc());
                }
            }
        } else {
            i += 1;
        }
    }
    None
}
