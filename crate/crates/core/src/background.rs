//! Temporal median background initialization.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::media_io::{BBox, Frame};

pub const DEFAULT_MAX_SAMPLES: usize = 150;

#[derive(Debug, Error)]
pub enum BackgroundError {
    #[error("no frames to build a background from")]
    NoFrames,
    #[error("stride and max_samples must be at least 1")]
    BadSampling,
    #[error("frame {frame} is {found:?}, expected {expected:?}")]
    DimensionMismatch {
        frame: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("duplicate frame index {0} in background samples")]
    DuplicateFrame(usize),
    #[error("bbox {bbox:?} exceeds {width}x{height} image")]
    RoiOutOfBounds {
        bbox: BBox,
        width: usize,
        height: usize,
    },
    #[error("invalid background file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundModel {
    pub video_id: String,
    pub image: Frame,
    pub source_frame_indices: Vec<usize>,
}

/// Smallest stride that keeps the sample count within `max_samples`.
pub fn default_stride(frame_count: usize, max_samples: usize) -> usize {
    frame_count.div_ceil(max_samples.max(1)).max(1)
}

fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-pixel median over frames `0, stride, 2*stride, ...`, at most
/// `max_samples` of them. Even sample counts average the two middle values.
pub fn median_background(
    video_id: &str,
    frames: &[Frame],
    max_samples: usize,
    stride: usize,
) -> Result<BackgroundModel, BackgroundError> {
    if frames.is_empty() {
        return Err(BackgroundError::NoFrames);
    }
    if stride == 0 || max_samples == 0 {
        return Err(BackgroundError::BadSampling);
    }
    let samples: Vec<&Frame> = frames.iter().step_by(stride).take(max_samples).collect();
    let expected = samples[0].dims();
    for f in &samples {
        if f.dims() != expected {
            return Err(BackgroundError::DimensionMismatch {
                frame: f.frame_index,
                expected,
                found: f.dims(),
            });
        }
    }
    let mut indices: Vec<usize> = samples.iter().map(|f| f.frame_index).collect();
    indices.sort_unstable();
    if let Some(w) = indices.windows(2).find(|w| w[0] == w[1]) {
        return Err(BackgroundError::DuplicateFrame(w[0]));
    }

    let (width, height) = expected;
    let data: Vec<f64> = (0..width * height)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(samples.len()),
            |buf, p| {
                buf.clear();
                buf.extend(samples.iter().map(|f| f.data[p]));
                median_in_place(buf)
            },
        )
        .collect();
    Ok(BackgroundModel {
        video_id: video_id.to_owned(),
        image: Frame::new(width, height, data, 0),
        source_frame_indices: indices,
    })
}

/// Sub-image inside `bbox`. The result keeps the source frame index.
pub fn extract_roi(image: &Frame, bbox: BBox) -> Result<Frame, BackgroundError> {
    if !bbox.fits_in(image.width, image.height) {
        return Err(BackgroundError::RoiOutOfBounds {
            bbox,
            width: image.width,
            height: image.height,
        });
    }
    let mut data = Vec::with_capacity(bbox.w * bbox.h);
    for r in bbox.y..bbox.y + bbox.h {
        let start = r * image.width + bbox.x;
        data.extend_from_slice(&image.data[start..start + bbox.w]);
    }
    Ok(Frame {
        width: bbox.w,
        height: bbox.h,
        data,
        frame_index: image.frame_index,
    })
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    video_id: String,
    width: usize,
    height: usize,
    source_frame_indices: Vec<usize>,
}

impl BackgroundModel {
    /// Writes `<stem>.pgm` (16-bit binary PGM) and `<stem>.json`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), BackgroundError> {
        fs::create_dir_all(dir)?;
        let img = &self.image;
        let mut bytes = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
        for v in &img.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            bytes.extend_from_slice(&q.to_be_bytes());
        }
        fs::File::create(dir.join(format!("{stem}.pgm")))?.write_all(&bytes)?;
        let sidecar = Sidecar {
            video_id: self.video_id.clone(),
            width: img.width,
            height: img.height,
            source_frame_indices: self.source_frame_indices.clone(),
        };
        fs::write(
            dir.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&sidecar)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, BackgroundError> {
        let sidecar: Sidecar =
            serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        let bytes = fs::read(dir.join(format!("{stem}.pgm")))?;
        let header = format!("P5\n{} {}\n65535\n", sidecar.width, sidecar.height);
        let body = bytes
            .strip_prefix(header.as_bytes())
            .ok_or_else(|| BackgroundError::Format("unexpected PGM header".into()))?;
        if body.len() != 2 * sidecar.width * sidecar.height {
            return Err(BackgroundError::Format("truncated PGM body".into()));
        }
        let data = body
            .chunks_exact(2)
            .map(|b| u16::from_be_bytes([b[0], b[1]]) as f64 / 65535.0)
            .collect();
        Ok(Self {
            video_id: sidecar.video_id,
            image: Frame::new(sidecar.width, sidecar.height, data, 0),
            source_frame_indices: sidecar.source_frame_indices,
        })
    }
}
