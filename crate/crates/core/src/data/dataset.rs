//! On-disk dataset: a `manifest.toml` plus one directory of RFRM frames per
//! sample (`<id>/f000.rfrm`, inputs first, then targets).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::frame::{encode_frame, load_frame, FrameSource};
use crate::data::sequence::SequenceSample;
use crate::error::{Error, FormatError, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATASET_FORMAT: &str = "nowcast-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Origin of the frames; RFRM files do not record it.
    pub source: FrameSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_frames: usize,
    pub output_frames: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub samples: Vec<ManifestEntry>,
}

fn frame_name(i: usize) -> String {
    format!("f{i:03}.rfrm")
}

/// Writes `samples` under `dir`. All samples must share frame counts and
/// dimensions. Output bytes depend only on the samples.
pub fn save_dataset(samples: &[SequenceSample], dir: &Path) -> Result<Manifest> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("cannot save an empty dataset".into()))?;
    let (n_in, n_out) = (first.inputs.len(), first.targets.len());
    let (h, w) = first.frame_dims();
    for s in samples {
        if (s.inputs.len(), s.targets.len()) != (n_in, n_out) || s.frame_dims() != (h, w) {
            return Err(Error::Sample {
                id: s.id.clone(),
                source: Box::new(Error::shape(
                    "save_dataset",
                    &[s.inputs.len(), s.targets.len(), s.frame_dims().0, s.frame_dims().1],
                    &[n_in, n_out, h, w],
                )),
            });
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if s.id.is_empty() || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(Error::InvalidConfig(format!(
                "sample id {:?} is not a valid directory name",
                s.id
            )));
        }
        let sdir = dir.join(&s.id);
        fs::create_dir_all(&sdir).map_err(|e| Error::io(&sdir, e))?;
        for (i, f) in s.frames().enumerate() {
            let p = sdir.join(frame_name(i));
            fs::write(&p, encode_frame(f)).map_err(|e| Error::io(&p, e))?;
        }
        entries.push(ManifestEntry {
            id: s.id.clone(),
            source: s.inputs[0].source,
            warning: s.warning.clone(),
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        input_frames: n_in,
        output_frames: n_out,
        frame_h: h,
        frame_w: w,
        samples: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| FormatError::Malformed(e.to_string()))?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| FormatError::Malformed(format!("{}: {e}", p.display())))?;
    if m.format != DATASET_FORMAT {
        return Err(FormatError::Malformed(format!("{} is not a {DATASET_FORMAT} manifest", p.display())).into());
    }
    if m.version != DATASET_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: m.version as u16,
            supported: DATASET_VERSION as u16,
        }
        .into());
    }
    Ok(m)
}

/// Reads every sample listed in the manifest. Errors carry the sample id.
pub fn load_dataset(dir: &Path) -> Result<Vec<SequenceSample>> {
    let m = load_manifest(dir)?;
    let window = m.input_frames + m.output_frames;
    m.samples
        .iter()
        .map(|e| {
            let wrap = |source| Error::Sample {
                id: e.id.clone(),
                source: Box::new(source),
            };
            let mut frames = (0..window)
                .map(|i| load_frame(&dir.join(&e.id).join(frame_name(i))))
                .collect::<Result<Vec<_>>>()
                .map_err(wrap)?;
            for f in frames.iter_mut() {
                f.source = e.source;
            }
            if let Some(f) = frames
                .iter()
                .find(|f| (f.height(), f.width()) != (m.frame_h, m.frame_w))
            {
                return Err(wrap(Error::shape(
                    "load_dataset",
                    &[f.height(), f.width()],
                    &[m.frame_h, m.frame_w],
                )));
            }
            let targets = frames.split_off(m.input_frames);
            let mut s = SequenceSample::new(e.id.clone(), frames, targets).map_err(wrap)?;
            s.warning = e.warning.clone();
            Ok(s)
        })
        .collect()
}
