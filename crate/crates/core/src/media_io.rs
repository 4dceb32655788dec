//! Frame, instance-mask and ground-truth I/O plus a seeded synthetic video
//! generator.
//!
//! Frames are grayscale with intensities in `[0, 1]`. Instance masks are read
//! either from per-frame 16-bit label images or from a line-delimited text
//! format whose mask field is a run-length encoding of the full frame in
//! row-major order:
//!
//! ```text
//! #size,<video>,<width>,<height>
//! video,frame,label,rle
//! <video>,<frame>,<label>,<count>,<value>,<count>,<value>,...
//! ```
//!
//! Every video referenced by a record must have a preceding `#size` line.
//! Runs alternate freely between values `0` and `1` and must cover exactly
//! `width * height` pixels.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MediaError {
    #[error("directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("no frames in {0}")]
    NoFrames(PathBuf),
    #[error("need at least 2 frames, found {found} in {dir}")]
    TooFewFrames { dir: PathBuf, found: usize },
    #[error("dimension mismatch: expected {expected:?}, got {found:?} ({context})")]
    DimensionMismatch {
        expected: (usize, usize),
        found: (usize, usize),
        context: String,
    },
    #[error("duplicate frame index {0}")]
    DuplicateFrame(usize),
    #[error("malformed instance file {path}, line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("mask pixel ({row}, {col}) outside {width}x{height} frame")]
    PixelOutOfBounds {
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("instance {label} of {video} frame {frame} has an empty mask")]
    EmptyMask {
        video: String,
        frame: usize,
        label: u32,
    },
    #[error("unsupported ground-truth value {value} in {path}")]
    GroundTruthValue { path: PathBuf, value: u8 },
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthetic(String),
    #[error("object {object} leaves the {width}x{height} frame at frame {frame}")]
    TrajectoryOutOfBounds {
        object: usize,
        frame: usize,
        width: usize,
        height: usize,
    },
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MediaError>;

/// A grayscale frame, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
    pub frame_index: usize,
}

impl Frame {
    /// Builds a frame, clamping intensities into `[0, 1]`.
    pub fn new(width: usize, height: usize, mut data: Vec<f64>, frame_index: usize) -> Self {
        assert_eq!(data.len(), width * height, "frame data length");
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self {
            width,
            height,
            data,
            frame_index,
        }
    }

    pub fn filled(width: usize, height: usize, value: f64, frame_index: usize) -> Self {
        Self::new(width, height, vec![value; width * height], frame_index)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Pixel read with coordinates clamped to the frame border.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A pixel coordinate. Ordering is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub row: usize,
    pub col: usize,
}

impl Pixel {
    pub fn new(row: usize, col: usize) -> Self {
        Self { row, col }
    }
}

/// Axis-aligned box: `x` is the left column, `y` the top row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BBox {
    pub fn contains(&self, p: Pixel) -> bool {
        p.col >= self.x && p.col < self.x + self.w && p.row >= self.y && p.row < self.y + self.h
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.w > 0 && self.h > 0 && self.x + self.w <= width && self.y + self.h <= height
    }

    /// Tight bounds of a non-empty pixel set.
    pub fn enclosing(pixels: &[Pixel]) -> Option<Self> {
        let first = pixels.first()?;
        let (mut r0, mut r1, mut c0, mut c1) = (first.row, first.row, first.col, first.col);
        for p in pixels {
            r0 = r0.min(p.row);
            r1 = r1.max(p.row);
            c0 = c0.min(p.col);
            c1 = c1.max(p.col);
        }
        Some(Self {
            x: c0,
            y: r0,
            w: c1 - c0 + 1,
            h: r1 - r0 + 1,
        })
    }
}

/// One segmented object in one frame; becomes one graph node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub video_id: String,
    pub frame_index: usize,
    /// Label assigned by the external segmenter. Opaque.
    pub label: u32,
    pub bbox: BBox,
    /// Sorted, duplicate-free.
    pub mask_pixels: Vec<Pixel>,
    pub node_id: usize,
}

impl Instance {
    /// Normalizes the pixel set and recomputes the tight bounding box.
    pub fn from_pixels(
        video_id: impl Into<String>,
        frame_index: usize,
        label: u32,
        mut mask_pixels: Vec<Pixel>,
        node_id: usize,
    ) -> Result<Self> {
        let video_id = video_id.into();
        mask_pixels.sort_unstable();
        mask_pixels.dedup();
        let bbox = BBox::enclosing(&mask_pixels).ok_or_else(|| MediaError::EmptyMask {
            video: video_id.clone(),
            frame: frame_index,
            label,
        })?;
        Ok(Self {
            video_id,
            frame_index,
            label,
            bbox,
            mask_pixels,
            node_id,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GtLabel {
    Background,
    Foreground,
    Unknown,
}

impl GtLabel {
    /// CDNet2014 encoding. 50 (hard shadow) counts as background.
    pub fn from_u8(value: u8) -> Option<Self> {
        match value {
            0 | 50 => Some(GtLabel::Background),
            85 | 170 => Some(GtLabel::Unknown),
            255 => Some(GtLabel::Foreground),
            _ => None,
        }
    }

    pub fn to_u8(self) -> u8 {
        match self {
            GtLabel::Background => 0,
            GtLabel::Unknown => 170,
            GtLabel::Foreground => 255,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    pub video_id: String,
    pub frame_index: usize,
    pub width: usize,
    pub height: usize,
    pub data: Vec<GtLabel>,
}

impl GroundTruthMask {
    #[inline]
    pub fn get(&self, row: usize, col: usize) -> GtLabel {
        self.data[row * self.width + col]
    }

    pub fn has_foreground(&self) -> bool {
        self.data.contains(&GtLabel::Foreground)
    }
}

/// ITU-R BT.601 luma.
pub fn to_grayscale(r: f64, g: f64, b: f64) -> f64 {
    let (r, g, b) = (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
    // g + 0.299 (r - g) + 0.114 (b - g): exact for gray input
    (g + 0.299 * (r - g) + 0.114 * (b - g)).clamp(0.0, 1.0)
}

/// Filename template with a single `*` standing for the frame number,
/// e.g. `in*.png` matches `in000001.png`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePattern {
    prefix: String,
    suffix: String,
}

impl FramePattern {
    pub fn parse(template: &str) -> Option<Self> {
        let (prefix, suffix) = template.split_once('*')?;
        if suffix.contains('*') {
            return None;
        }
        Some(Self {
            prefix: prefix.to_owned(),
            suffix: suffix.to_owned(),
        })
    }

    pub fn frame_index(&self, file_name: &str) -> Option<usize> {
        let digits = file_name
            .strip_prefix(&self.prefix)?
            .strip_suffix(&self.suffix)?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    }

    /// Six-digit zero-padded file name (CDNet2014 convention).
    pub fn file_name(&self, index: usize) -> String {
        format!("{}{:06}{}", self.prefix, index, self.suffix)
    }
}

fn list_indexed(dir: &Path, pattern: &FramePattern) -> Result<Vec<(usize, PathBuf)>> {
    if !dir.is_dir() {
        return Err(MediaError::MissingDirectory(dir.to_path_buf()));
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name();
        if let Some(idx) = name.to_str().and_then(|n| pattern.frame_index(n)) {
            files.push((idx, entry.path()));
        }
    }
    files.sort();
    if let Some(w) = files.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(MediaError::DuplicateFrame(w[0].0));
    }
    Ok(files)
}

/// Decodes an image to grayscale intensities in `[0, 1]`.
pub fn read_gray_image(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f64 / 65535.0)
            .collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| to_grayscale(p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0))
            .collect(),
    };
    Ok((w, h, data))
}

/// Loads a frame sequence sorted by the index parsed from each file name.
pub fn load_sequence(dir: &Path, pattern: &FramePattern) -> Result<Vec<Frame>> {
    let files = list_indexed(dir, pattern)?;
    match files.len() {
        0 => return Err(MediaError::NoFrames(dir.to_path_buf())),
        1 => {
            return Err(MediaError::TooFewFrames {
                dir: dir.to_path_buf(),
                found: 1,
            })
        }
        _ => {}
    }
    let frames = files
        .par_iter()
        .map(|(idx, path)| {
            let (w, h, data) = read_gray_image(path)?;
            Ok(Frame::new(w, h, data, *idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let expected = frames[0].dims();
    if let Some(bad) = frames.iter().find(|f| f.dims() != expected) {
        return Err(MediaError::DimensionMismatch {
            expected,
            found: bad.dims(),
            context: format!("frame {}", bad.frame_index),
        });
    }
    Ok(frames)
}

/// Loads ground-truth images (`gt*.png` style) for one video.
pub fn load_ground_truth(
    dir: &Path,
    pattern: &FramePattern,
    video_id: &str,
) -> Result<Vec<GroundTruthMask>> {
    let files = list_indexed(dir, pattern)?;
    files
        .par_iter()
        .map(|(idx, path)| {
            let img = image::open(path)?.to_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let data = img
                .into_raw()
                .into_iter()
                .map(|v| {
                    GtLabel::from_u8(v).ok_or_else(|| MediaError::GroundTruthValue {
                        path: path.clone(),
                        value: v,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(GroundTruthMask {
                video_id: video_id.to_owned(),
                frame_index: *idx,
                width: w,
                height: h,
                data,
            })
        })
        .collect()
}

fn parse_field<T: std::str::FromStr>(s: &str, path: &Path, line: usize, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| MediaError::Malformed {
        path: path.to_path_buf(),
        line,
        reason: format!("bad {what}: {s:?}"),
    })
}

/// Reads the run-length-encoded text instance format.
///
/// Each record is one instance; node ids are assigned in file order.
pub fn load_instances(path: &Path) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path)?;
    parse_instances(&text, path)
}

pub fn parse_instances(text: &str, path: &Path) -> Result<Vec<Instance>> {
    let malformed = |line: usize, reason: String| MediaError::Malformed {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut dims: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() || line == "video,frame,label,rle" {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#size,") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(malformed(lineno, "expected #size,<video>,<width>,<height>".into()));
            }
            let w: usize = parse_field(parts[1], path, lineno, "width")?;
            let h: usize = parse_field(parts[2], path, lineno, "height")?;
            if w == 0 || h == 0 {
                return Err(malformed(lineno, "zero frame size".into()));
            }
            dims.insert(parts[0].to_owned(), (w, h));
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 5 || !(fields.len() - 3).is_multiple_of(2) {
            return Err(malformed(lineno, "expected video,frame,label,(count,value)+".into()));
        }
        let video = fields[0].to_owned();
        let frame: usize = parse_field(fields[1], path, lineno, "frame")?;
        let label: u32 = parse_field(fields[2], path, lineno, "label")?;
        let &(w, h) = dims
            .get(&video)
            .ok_or_else(|| malformed(lineno, format!("no #size line for video {video}")))?;
        let mut pos = 0usize;
        let mut pixels = Vec::new();
        for pair in fields[3..].chunks(2) {
            let count: usize = parse_field(pair[0], path, lineno, "run length")?;
            let value: u8 = parse_field(pair[1], path, lineno, "run value")?;
            if count == 0 || value > 1 {
                return Err(malformed(lineno, "runs need count > 0 and value 0 or 1".into()));
            }
            if pos + count > w * h {
                let p = pos + count - 1;
                return Err(MediaError::PixelOutOfBounds {
                    row: p / w,
                    col: p % w,
                    width: w,
                    height: h,
                });
            }
            if value == 1 {
                pixels.extend((pos..pos + count).map(|p| Pixel::new(p / w, p % w)));
            }
            pos += count;
        }
        if pos != w * h {
            return Err(malformed(lineno, format!("runs cover {pos} of {} pixels", w * h)));
        }
        let node_id = out.len();
        out.push(Instance::from_pixels(video, frame, label, pixels, node_id)?);
    }
    Ok(out)
}

/// Encodes instances in the text format. `dims` must cover every video.
pub fn format_instances(
    instances: &[Instance],
    dims: &BTreeMap<String, (usize, usize)>,
) -> Result<String> {
    let mut s = String::new();
    for (video, (w, h)) in dims {
        let _ = writeln!(s, "#size,{video},{w},{h}");
    }
    s.push_str("video,frame,label,rle\n");
    for inst in instances {
        let &(w, h) = dims.get(&inst.video_id).ok_or_else(|| {
            MediaError::InvalidSynthetic(format!("no frame size for video {}", inst.video_id))
        })?;
        let _ = write!(s, "{},{},{}", inst.video_id, inst.frame_index, inst.label);
        let mut pos = 0usize;
        for run in mask_runs(&inst.mask_pixels, w, h)? {
            if run.0 > pos {
                let _ = write!(s, ",{},0", run.0 - pos);
            }
            let _ = write!(s, ",{},1", run.1 - run.0);
            pos = run.1;
        }
        if pos < w * h {
            let _ = write!(s, ",{},0", w * h - pos);
        }
        s.push('\n');
    }
    Ok(s)
}

/// Maximal `[start, end)` runs of linear indices of a sorted pixel set.
fn mask_runs(pixels: &[Pixel], w: usize, h: usize) -> Result<Vec<(usize, usize)>> {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for p in pixels {
        if p.row >= h || p.col >= w {
            return Err(MediaError::PixelOutOfBounds {
                row: p.row,
                col: p.col,
                width: w,
                height: h,
            });
        }
        let idx = p.row * w + p.col;
        match runs.last_mut() {
            Some(last) if last.1 == idx => last.1 += 1,
            _ => runs.push((idx, idx + 1)),
        }
    }
    Ok(runs)
}

pub fn save_instances(
    path: &Path,
    instances: &[Instance],
    dims: &BTreeMap<String, (usize, usize)>,
) -> Result<()> {
    fs::write(path, format_instances(instances, dims)?)?;
    Ok(())
}

/// 8-connected components of each nonzero label value in a label map.
///
/// Components are emitted by label value, then by their first pixel in
/// row-major order.
pub fn label_map_instances(
    video_id: &str,
    frame_index: usize,
    width: usize,
    height: usize,
    labels: &[u16],
    first_node_id: usize,
) -> Result<Vec<Instance>> {
    let mut seen = vec![false; labels.len()];
    let mut comps: Vec<(u16, Vec<Pixel>)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        let value = labels[start];
        if value == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut pixels = Vec::new();
        while let Some(p) = stack.pop() {
            let (r, c) = (p / width, p % width);
            pixels.push(Pixel::new(r, c));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    if !seen[q] && labels[q] == value {
                        seen[q] = true;
                        stack.push(q);
                    }
                }
            }
        }
        comps.push((value, pixels));
    }
    // stable: components of equal label keep row-major discovery order
    comps.sort_by_key(|(v, _)| *v);
    comps
        .into_iter()
        .enumerate()
        .map(|(i, (value, px))| {
            Instance::from_pixels(video_id, frame_index, value as u32, px, first_node_id + i)
        })
        .collect()
}

/// Loads per-frame 16-bit label images for one video.
pub fn load_label_maps(dir: &Path, pattern: &FramePattern, video_id: &str) -> Result<Vec<Instance>> {
    let files = list_indexed(dir, pattern)?;
    let per_frame = files
        .par_iter()
        .map(|(idx, path)| {
            let img = image::open(path)?.to_luma16();
            let (w, h) = (img.width() as usize, img.height() as usize);
            label_map_instances(video_id, *idx, w, h, img.as_raw(), 0)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out: Vec<Instance> = per_frame.into_iter().flatten().collect();
    for (i, inst) in out.iter_mut().enumerate() {
        inst.node_id = i;
    }
    Ok(out)
}

/// Writes one frame's instances as a 16-bit label image. Overlapping masks
/// cannot be represented; later instances overwrite earlier ones.
pub fn save_label_map(path: &Path, width: usize, height: usize, instances: &[Instance]) -> Result<()> {
    let mut buf = vec![0u16; width * height];
    for inst in instances {
        for p in &inst.mask_pixels {
            if p.row >= height || p.col >= width {
                return Err(MediaError::PixelOutOfBounds {
                    row: p.row,
                    col: p.col,
                    width,
                    height,
                });
            }
            buf[p.row * width + p.col] = inst.label as u16;
        }
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(width as u32, height as u32, buf).expect("buffer size");
    img.save(path)?;
    Ok(())
}

/// Writes a frame as 8-bit grayscale; format follows the file extension.
pub fn save_frame(path: &Path, frame: &Frame) -> Result<()> {
    let raw: Vec<u8> = frame
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(frame.width as u32, frame.height as u32, raw).expect("buffer size");
    img.save(path)?;
    Ok(())
}

pub fn save_ground_truth(path: &Path, gt: &GroundTruthMask) -> Result<()> {
    let raw: Vec<u8> = gt.data.iter().map(|l| l.to_u8()).collect();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(gt.width as u32, gt.height as u32, raw).expect("buffer size");
    img.save(path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic sequences
// ---------------------------------------------------------------------------

/// A textured rectangle translating with constant integer velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovingObject {
    /// Top-left corner in frame 0, `(row, col)`.
    pub start: (i64, i64),
    /// Displacement per frame, `(rows, cols)`.
    pub velocity: (i64, i64),
    pub size: (usize, usize),
    pub intensity: f64,
    #[serde(default = "default_texture")]
    pub texture: f64,
}

/// A textured rectangle that never moves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObject {
    pub position: (usize, usize),
    pub size: (usize, usize),
    pub intensity: f64,
    #[serde(default = "default_texture")]
    pub texture: f64,
}

fn default_texture() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub video_id: String,
    pub frame_count: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub moving: Vec<MovingObject>,
    #[serde(default)]
    pub distractors: Vec<StaticObject>,
    /// Mean and half-range of the static background texture.
    pub background: (f64, f64),
    /// Half-range of the per-frame uniform noise.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MediaError::InvalidSynthetic(m.to_owned()));
        if self.frame_count < 2 {
            return bad("frame_count must be at least 2");
        }
        if self.width == 0 || self.height == 0 {
            return bad("frame size must be positive");
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.background.1) {
            return bad("noise and texture amplitudes must lie in [0, 1]");
        }
        let sizes = self
            .moving
            .iter()
            .map(|m| m.size)
            .chain(self.distractors.iter().map(|d| d.size));
        if sizes.into_iter().any(|(h, w)| h == 0 || w == 0) {
            return bad("object sizes must be positive");
        }
        for (i, d) in self.distractors.iter().enumerate() {
            if d.position.0 + d.size.0 > self.height || d.position.1 + d.size.1 > self.width {
                return Err(MediaError::TrajectoryOutOfBounds {
                    object: self.moving.len() + i,
                    frame: 0,
                    width: self.width,
                    height: self.height,
                });
            }
        }
        for (i, m) in self.moving.iter().enumerate() {
            for t in 0..self.frame_count {
                let (r, c) = m.top_left(t);
                if r < 0
                    || c < 0
                    || r as usize + m.size.0 > self.height
                    || c as usize + m.size.1 > self.width
                {
                    return Err(MediaError::TrajectoryOutOfBounds {
                        object: i,
                        frame: t,
                        width: self.width,
                        height: self.height,
                    });
                }
            }
        }
        Ok(())
    }
}

impl MovingObject {
    fn top_left(&self, t: usize) -> (i64, i64) {
        (
            self.start.0 + self.velocity.0 * t as i64,
            self.start.1 + self.velocity.1 * t as i64,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub frames: Vec<Frame>,
    /// Per frame: moving objects first, then distractors.
    pub instances: Vec<Instance>,
    pub ground_truth: Vec<GroundTruthMask>,
}

fn texture_patch(rng: &mut ChaCha8Rng, (h, w): (usize, usize), amplitude: f64) -> Vec<f64> {
    (0..h * w).map(|_| rng.random_range(-1.0..=1.0) * amplitude).collect()
}

/// Renders a labeled synthetic sequence. Frame indices start at 1.
pub fn synth_sequence(spec: &SyntheticSpec) -> Result<SyntheticVideo> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (level, amp) = spec.background;
    let backdrop: Vec<f64> = (0..w * h)
        .map(|_| level + rng.random_range(-1.0..=1.0) * amp)
        .collect();
    let moving_tex: Vec<Vec<f64>> = spec
        .moving
        .iter()
        .map(|m| texture_patch(&mut rng, m.size, m.texture))
        .collect();
    let static_tex: Vec<Vec<f64>> = spec
        .distractors
        .iter()
        .map(|d| texture_patch(&mut rng, d.size, d.texture))
        .collect();

    let rect = |r0: usize, c0: usize, (rh, rw): (usize, usize)| -> Vec<Pixel> {
        (r0..r0 + rh)
            .flat_map(|r| (c0..c0 + rw).map(move |c| Pixel::new(r, c)))
            .collect()
    };

    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut instances = Vec::new();
    let mut ground_truth = Vec::with_capacity(spec.frame_count);
    for t in 0..spec.frame_count {
        let frame_index = t + 1;
        let mut img = backdrop.clone();
        let mut gt = vec![GtLabel::Background; w * h];
        for (d, tex) in spec.distractors.iter().zip(&static_tex) {
            let (r0, c0) = d.position;
            for (k, p) in rect(r0, c0, d.size).into_iter().enumerate() {
                img[p.row * w + p.col] = d.intensity + tex[k];
            }
        }
        let mut label = 1u32;
        let mut frame_instances = Vec::new();
        for (m, tex) in spec.moving.iter().zip(&moving_tex) {
            let (r0, c0) = m.top_left(t);
            let pixels = rect(r0 as usize, c0 as usize, m.size);
            for (k, p) in pixels.iter().enumerate() {
                img[p.row * w + p.col] = m.intensity + tex[k];
                gt[p.row * w + p.col] = GtLabel::Foreground;
            }
            frame_instances.push(Instance::from_pixels(&spec.video_id, frame_index, label, pixels, 0)?);
            label += 1;
        }
        for d in &spec.distractors {
            let pixels = rect(d.position.0, d.position.1, d.size);
            frame_instances.push(Instance::from_pixels(&spec.video_id, frame_index, label, pixels, 0)?);
            label += 1;
        }
        if spec.noise > 0.0 {
            for v in &mut img {
                *v += rng.random_range(-1.0..=1.0) * spec.noise;
            }
        }
        frames.push(Frame::new(w, h, img, frame_index));
        ground_truth.push(GroundTruthMask {
            video_id: spec.video_id.clone(),
            frame_index,
            width: w,
            height: h,
            data: gt,
        });
        instances.extend(frame_instances);
    }
    for (i, inst) in instances.iter_mut().enumerate() {
        inst.node_id = i;
    }
    Ok(SyntheticVideo {
        video_id: spec.video_id.clone(),
        frames,
        instances,
        ground_truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square_spec(moving: usize, distractors: usize) -> SyntheticSpec {
        SyntheticSpec {
            video_id: "v".into(),
            frame_count: 10,
            width: 32,
            height: 24,
            moving: (0..moving)
                .map(|i| MovingObject {
                    start: (2 + 8 * i as i64, 1),
                    velocity: (0, 1),
                    size: (4, 4),
                    intensity: 0.8,
                    texture: 0.1,
                })
                .collect(),
            distractors: (0..distractors)
                .map(|_| StaticObject {
                    position: (16, 20),
                    size: (5, 6),
                    intensity: 0.7,
                    texture: 0.1,
                })
                .collect(),
            background: (0.3, 0.1),
            noise: 0.02,
            seed: 11,
        }
    }

    #[test]
    fn grayscale_weights() {
        assert_eq!(to_grayscale(1.0, 1.0, 1.0), 1.0);
        assert_eq!(to_grayscale(0.0, 0.0, 0.0), 0.0);
        assert!((to_grayscale(1.0, 0.0, 0.0) - 0.299).abs() < 1e-15);
        assert_eq!(to_grayscale(2.0, 2.0, -1.0), to_grayscale(1.0, 1.0, 0.0));
    }

    #[test]
    fn pattern_parsing() {
        let p = FramePattern::parse("in*.png").unwrap();
        assert_eq!(p.frame_index("in000012.png"), Some(12));
        assert_eq!(p.frame_index("gt000012.png"), None);
        assert_eq!(p.frame_index("in.png"), None);
        assert_eq!(p.file_name(3), "in000003.png");
        assert!(FramePattern::parse("in.png").is_none());
    }

    fn write_gray(path: &Path, w: u32, h: u32, v: u8) {
        let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(w, h, Luma([v]));
        img.save(path).unwrap();
    }

    #[test]
    fn load_sequence_orders_frames() {
        let dir = tempfile::tempdir().unwrap();
        for i in [3, 1, 2] {
            write_gray(&dir.path().join(format!("in{i:06}.png")), 4, 3, 51 * i as u8);
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let frames = load_sequence(dir.path(), &FramePattern::parse("in*.png").unwrap()).unwrap();
        let idx: Vec<usize> = frames.iter().map(|f| f.frame_index).collect();
        assert_eq!(idx, vec![1, 2, 3]);
        assert!((frames[1].get(0, 0) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn load_sequence_reads_rgb_and_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let rgb: ImageBuffer<image::Rgb<u8>, Vec<u8>> =
            ImageBuffer::from_pixel(2, 2, image::Rgb([255, 0, 0]));
        rgb.save(dir.path().join("in000001.png")).unwrap();
        rgb.save(dir.path().join("in000002.png")).unwrap();
        let frames = load_sequence(dir.path(), &FramePattern::parse("in*.png").unwrap()).unwrap();
        assert!((frames[0].get(1, 1) - 0.299).abs() < 1e-12);

        let pgm = tempfile::tempdir().unwrap();
        write_gray(&pgm.path().join("in000001.pgm"), 3, 3, 255);
        write_gray(&pgm.path().join("in000002.pgm"), 3, 3, 0);
        let frames = load_sequence(pgm.path(), &FramePattern::parse("in*.pgm").unwrap()).unwrap();
        assert_eq!(frames[0].data, vec![1.0; 9]);
    }

    #[test]
    fn load_sequence_errors() {
        let pat = FramePattern::parse("in*.png").unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(dir.path(), &pat), Err(MediaError::NoFrames(_))));
        write_gray(&dir.path().join("in000001.png"), 4, 4, 0);
        assert!(matches!(
            load_sequence(dir.path(), &pat),
            Err(MediaError::TooFewFrames { found: 1, .. })
        ));
        write_gray(&dir.path().join("in000002.png"), 5, 4, 0);
        assert!(matches!(
            load_sequence(dir.path(), &pat),
            Err(MediaError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            load_sequence(&dir.path().join("missing"), &pat),
            Err(MediaError::MissingDirectory(_))
        ));
    }

    #[test]
    fn single_region_gets_tight_bbox() {
        // 5 pixels in rows 2-3 of an 8x6 frame: (2,3),(2,4),(3,2),(3,3),(3,4)
        let text = "#size,v,8,6\nvideo,frame,label,rle\nv,1,7,19,0,2,1,5,0,3,1,19,0\n";
        let inst = parse_instances(text, Path::new("t")).unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].mask_pixels.len(), 5);
        assert_eq!(inst[0].bbox, BBox { x: 2, y: 2, w: 3, h: 2 });
        assert_eq!(inst[0].label, 7);
    }

    #[test]
    fn instance_file_errors() {
        let p = Path::new("t");
        let empty = "#size,v,2,2\nv,1,1,4,0\n";
        assert!(matches!(parse_instances(empty, p), Err(MediaError::EmptyMask { .. })));
        let overflow = "#size,v,2,2\nv,1,1,3,0,2,1\n";
        assert!(matches!(parse_instances(overflow, p), Err(MediaError::PixelOutOfBounds { .. })));
        let short = "#size,v,2,2\nv,1,1,1,1\n";
        assert!(matches!(parse_instances(short, p), Err(MediaError::Malformed { .. })));
        let nosize = "v,1,1,4,1\n";
        assert!(matches!(parse_instances(nosize, p), Err(MediaError::Malformed { .. })));
        let junk = "#size,v,2,2\nv,x,1,4,1\n";
        assert!(matches!(parse_instances(junk, p), Err(MediaError::Malformed { .. })));
    }

    #[test]
    fn label_map_components() {
        // two disjoint labels plus a label split in two components
        #[rustfmt::skip]
        let labels: Vec<u16> = vec![
            1, 1, 0, 0, 2,
            0, 0, 0, 0, 2,
            3, 0, 0, 0, 0,
            0, 0, 0, 3, 3,
        ];
        let inst = label_map_instances("v", 4, 5, 4, &labels, 10).unwrap();
        assert_eq!(inst.len(), 4);
        let ids: Vec<usize> = inst.iter().map(|i| i.node_id).collect();
        assert_eq!(ids, vec![10, 11, 12, 13]);
        assert_eq!(inst[0].label, 1);
        assert_eq!(inst[2].label, 3);
        assert_eq!(inst[2].mask_pixels, vec![Pixel::new(2, 0)]);
        assert_eq!(inst[3].bbox, BBox { x: 3, y: 3, w: 2, h: 1 });
        assert!(label_map_instances("v", 1, 5, 4, &[0; 20], 0).unwrap().is_empty());
    }

    #[test]
    fn label_map_file_round_trip() {
        let video = synth_sequence(&square_spec(2, 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let pat = FramePattern::parse("in*.png").unwrap();
        for f in &video.frames {
            let frame_inst: Vec<Instance> = video
                .instances
                .iter()
                .filter(|i| i.frame_index == f.frame_index)
                .cloned()
                .collect();
            save_label_map(&dir.path().join(pat.file_name(f.frame_index)), 32, 24, &frame_inst).unwrap();
        }
        let back = load_label_maps(dir.path(), &pat, "v").unwrap();
        assert_eq!(back, video.instances);
    }

    #[test]
    fn synthetic_square_trajectory() {
        let v = synth_sequence(&square_spec(1, 0)).unwrap();
        assert_eq!(v.frames.len(), 10);
        assert_eq!(v.instances.len(), 10);
        for (t, (inst, gt)) in v.instances.iter().zip(&v.ground_truth).enumerate() {
            assert_eq!(inst.bbox, BBox { x: 1 + t, y: 2, w: 4, h: 4 });
            let fg: Vec<Pixel> = (0..gt.data.len())
                .filter(|&i| gt.data[i] == GtLabel::Foreground)
                .map(|i| Pixel::new(i / 32, i % 32))
                .collect();
            assert_eq!(fg, inst.mask_pixels);
        }
    }

    #[test]
    fn synthetic_distractor_only_is_background() {
        let v = synth_sequence(&square_spec(0, 1)).unwrap();
        assert_eq!(v.instances.len(), 10);
        assert!(v.ground_truth.iter().all(|g| !g.has_foreground()));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synth_sequence(&square_spec(2, 1)).unwrap();
        let b = synth_sequence(&square_spec(2, 1)).unwrap();
        assert_eq!(a, b);
        let bits = |v: &SyntheticVideo| -> Vec<u64> {
            v.frames.iter().flat_map(|f| f.data.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn synthetic_rejects_escaping_trajectory() {
        let mut spec = square_spec(1, 0);
        spec.moving[0].velocity = (0, 4);
        assert!(matches!(
            synth_sequence(&spec),
            Err(MediaError::TrajectoryOutOfBounds { object: 0, .. })
        ));
        spec.frame_count = 1;
        assert!(matches!(synth_sequence(&spec), Err(MediaError::InvalidSynthetic(_))));
    }

    fn arb_instances() -> impl Strategy<Value = Vec<Instance>> {
        prop::collection::vec(
            (1usize..4, 1u32..9, prop::collection::vec((0usize..12, 0usize..9), 1..30)),
            0..8,
        )
        .prop_map(|raw| {
            raw.into_iter()
                .enumerate()
                .map(|(i, (frame, label, px))| {
                    let px = px.into_iter().map(|(r, c)| Pixel::new(r, c)).collect();
                    Instance::from_pixels("cam/a", frame, label, px, i).unwrap()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn text_format_round_trips(instances in arb_instances()) {
            let dims = BTreeMap::from([("cam/a".to_string(), (9usize, 12usize))]);
            let text = format_instances(&instances, &dims).unwrap();
            let back = parse_instances(&text, Path::new("t")).unwrap();
            prop_assert_eq!(&back, &instances);
            for inst in &back {
                prop_assert_eq!(Some(inst.bbox), BBox::enclosing(&inst.mask_pixels));
                prop_assert!(inst.mask_pixels.iter().all(|p| inst.bbox.contains(*p)));
            }
            // canonical encoding is a fixed point
            prop_assert_eq!(format_instances(&back, &dims).unwrap(), text);
        }
    }
}
