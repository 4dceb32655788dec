//! Node descriptors: optical-flow statistics over the instance mask plus
//! texture (LBP) and intensity histograms over four bounding-box images.
//!
//! Descriptor layout, in order:
//!
//! 1. flow magnitude histogram, then min/max/mean/std/MAD/range of the raw
//!    magnitudes
//! 2. flow orientation histogram over `[-pi, pi]`, then the same six stats
//! 3. for each of `I_t`, `I_{t-1}`, `B`, `|I_t - B|` (all cropped to the
//!    bounding box): LBP histogram, then intensity histogram

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::background::{extract_roi, BackgroundError, BackgroundModel};
use crate::media_io::{Frame, Instance, Pixel};

pub const STATS_PER_HISTOGRAM: usize = 6;
/// Smallest structure-tensor eigenvalue treated as solvable.
pub const MIN_EIGENVALUE: f64 = 1e-6;
const MATRIX_MAGIC: u32 = u32::from_le_bytes(*b"GMFX");

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid feature layout: {0}")]
    Layout(String),
    #[error("frame sizes differ: {0:?} vs {1:?}")]
    SizeMismatch((usize, usize), (usize, usize)),
    #[error("flow support is empty")]
    EmptySupport,
    #[error("window must be odd and at least 3, got {0}")]
    BadWindow(usize),
    #[error("support pixel {0:?} outside the frame")]
    SupportOutOfBounds(Pixel),
    #[error("no frame {frame} in video {video}")]
    MissingFrame { video: String, frame: usize },
    #[error("row {row} carries node id {node_id}")]
    NodeOrder { row: usize, node_id: usize },
    #[error("feature vector of node {node} has length {found}, expected {expected}")]
    Length {
        node: usize,
        found: usize,
        expected: usize,
    },
    #[error("invalid feature file: {0}")]
    Format(String),
    #[error(transparent)]
    Roi(#[from] BackgroundError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, FeatureError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub flow_magnitude_bins: usize,
    pub flow_orientation_bins: usize,
    /// Per image; LBP codes 0..=255 are pooled uniformly into these bins.
    pub lbp_bins: usize,
    /// Per image.
    pub intensity_bins: usize,
    /// Upper edge of the magnitude histogram in pixels; larger values land
    /// in the last bin.
    pub magnitude_max: f64,
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            flow_magnitude_bins: 32,
            flow_orientation_bins: 32,
            lbp_bins: 256,
            intensity_bins: 64,
            magnitude_max: 16.0,
        }
    }
}

impl FeatureLayout {
    pub fn validate(&self) -> Result<()> {
        let bins = [
            self.flow_magnitude_bins,
            self.flow_orientation_bins,
            self.lbp_bins,
            self.intensity_bins,
        ];
        if bins.contains(&0) {
            return Err(FeatureError::Layout("bin counts must be at least 1".into()));
        }
        if self.lbp_bins > 256 {
            return Err(FeatureError::Layout("at most 256 LBP bins".into()));
        }
        if !(self.magnitude_max > 0.0 && self.magnitude_max.is_finite()) {
            return Err(FeatureError::Layout("magnitude_max must be positive".into()));
        }
        Ok(())
    }

    /// Descriptor length `C`.
    pub fn dimension(&self) -> usize {
        self.flow_dimension() + 4 * (self.lbp_bins + self.intensity_bins)
    }

    pub fn flow_dimension(&self) -> usize {
        self.flow_magnitude_bins + self.flow_orientation_bins + 2 * STATS_PER_HISTOGRAM
    }
}

/// Per-pixel flow over a support set.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub vectors: Vec<(f64, f64)>,
    /// Set where the structure tensor was near-singular; the vector is zero.
    pub degenerate: Vec<bool>,
}

/// Single-scale Lucas-Kanade. `u` is the column (x) displacement, `v` the
/// row (y) displacement. Spatial gradients are central differences of
/// `prev`, the temporal gradient is `curr - prev`; reads beyond the border
/// replicate the edge.
pub fn lucas_kanade(prev: &Frame, curr: &Frame, support: &[Pixel], window: usize) -> Result<FlowField> {
    if prev.dims() != curr.dims() {
        return Err(FeatureError::SizeMismatch(prev.dims(), curr.dims()));
    }
    if window < 3 || window.is_multiple_of(2) {
        return Err(FeatureError::BadWindow(window));
    }
    if support.is_empty() {
        return Err(FeatureError::EmptySupport);
    }
    if let Some(p) = support.iter().find(|p| p.row >= prev.height || p.col >= prev.width) {
        return Err(FeatureError::SupportOutOfBounds(*p));
    }
    let half = (window / 2) as isize;
    let mut vectors = Vec::with_capacity(support.len());
    let mut degenerate = Vec::with_capacity(support.len());
    for p in support {
        let (mut sxx, mut sxy, mut syy, mut sxt, mut syt) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dr in -half..=half {
            for dc in -half..=half {
                let r = (p.row as isize + dr).clamp(0, prev.height as isize - 1);
                let c = (p.col as isize + dc).clamp(0, prev.width as isize - 1);
                let ix = 0.5 * (prev.get_clamped(r, c + 1) - prev.get_clamped(r, c - 1));
                let iy = 0.5 * (prev.get_clamped(r + 1, c) - prev.get_clamped(r - 1, c));
                let it = curr.get(r as usize, c as usize) - prev.get(r as usize, c as usize);
                sxx += ix * ix;
                sxy += ix * iy;
                syy += iy * iy;
                sxt += ix * it;
                syt += iy * it;
            }
        }
        let trace_half = 0.5 * (sxx + syy);
        let min_eig = trace_half - (0.25 * (sxx - syy) * (sxx - syy) + sxy * sxy).sqrt();
        if min_eig < MIN_EIGENVALUE {
            vectors.push((0.0, 0.0));
            degenerate.push(true);
            continue;
        }
        let det = sxx * syy - sxy * sxy;
        let u = (-syy * sxt + sxy * syt) / det;
        let v = (sxy * sxt - sxx * syt) / det;
        vectors.push((u, v));
        degenerate.push(false);
    }
    Ok(FlowField { vectors, degenerate })
}

/// min, max, mean, population std, mean absolute deviation, range.
/// All zero for an empty slice.
pub fn descriptive_stats(values: &[f64]) -> [f64; STATS_PER_HISTOGRAM] {
    if values.is_empty() {
        return [0.0; STATS_PER_HISTOGRAM];
    }
    let n = values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = (values.iter().sum::<f64>() / n).clamp(min, max);
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mad = values.iter().map(|v| (v - mean).abs()).sum::<f64>() / n;
    [min, max, mean, var.sqrt(), mad, max - min]
}

/// Normalized histogram of `values` over `[lo, hi]` with `bins` uniform bins.
/// Values at or beyond `hi` go to the last bin, below `lo` to the first.
fn range_histogram(values: impl Iterator<Item = f64>, lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut hist = vec![0.0; bins];
    let mut n = 0usize;
    for v in values {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        let idx = if t.is_nan() || t < 0.0 { 0 } else { (t as usize).min(bins - 1) };
        hist[idx] += 1.0;
        n += 1;
    }
    if n > 0 {
        for h in &mut hist {
            *h /= n as f64;
        }
    }
    hist
}

/// Magnitude and orientation histograms of a flow list, each followed by
/// the descriptive statistics of the raw values.
pub fn flow_features(flows: &[(f64, f64)], layout: &FeatureLayout) -> Result<Vec<f64>> {
    layout.validate()?;
    let mut out = Vec::with_capacity(layout.flow_dimension());
    if flows.is_empty() {
        out.resize(layout.flow_dimension(), 0.0);
        return Ok(out);
    }
    let magnitudes: Vec<f64> = flows.iter().map(|(u, v)| u.hypot(*v)).collect();
    let orientations: Vec<f64> = flows.iter().map(|(u, v)| v.atan2(*u)).collect();
    out.extend(range_histogram(
        magnitudes.iter().copied(),
        0.0,
        layout.magnitude_max,
        layout.flow_magnitude_bins,
    ));
    out.extend(descriptive_stats(&magnitudes));
    out.extend(range_histogram(
        orientations.iter().copied(),
        -PI,
        PI,
        layout.flow_orientation_bins,
    ));
    out.extend(descriptive_stats(&orientations));
    Ok(out)
}

/// 8-neighbor LBP code at an interior pixel. Neighbors run clockwise from
/// the top-left; bit `b` is set when neighbor `b` is `>=` the center.
pub fn lbp_code(image: &Frame, row: usize, col: usize) -> u8 {
    const OFFSETS: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
        (1, 0),
        (1, -1),
        (0, -1),
    ];
    let center = image.get(row, col);
    let mut code = 0u8;
    for (bit, (dr, dc)) in OFFSETS.iter().enumerate() {
        let n = image.get((row as isize + dr) as usize, (col as isize + dc) as usize);
        if n >= center {
            code |= 1 << bit;
        }
    }
    code
}

/// Normalized LBP histogram over interior pixels. Returns the all-zero
/// vector and `true` when the image is smaller than 3x3.
pub fn lbp_histogram(image: &Frame, bins: usize) -> (Vec<f64>, bool) {
    let bins = bins.clamp(1, 256);
    if image.width < 3 || image.height < 3 {
        return (vec![0.0; bins], true);
    }
    let mut hist = vec![0.0; bins];
    for r in 1..image.height - 1 {
        for c in 1..image.width - 1 {
            hist[lbp_code(image, r, c) as usize * bins / 256] += 1.0;
        }
    }
    let n = ((image.width - 2) * (image.height - 2)) as f64;
    for h in &mut hist {
        *h /= n;
    }
    (hist, false)
}

/// Normalized intensity histogram over `[0, 1]`, last bin right-closed.
/// Returns the all-zero vector and `true` for an empty image.
pub fn intensity_histogram(image: &Frame, bins: usize) -> (Vec<f64>, bool) {
    let bins = bins.max(1);
    if image.is_empty() {
        return (vec![0.0; bins], true);
    }
    (range_histogram(image.data.iter().copied(), 0.0, 1.0, bins), false)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFlags {
    /// Mask pixels whose flow was unsolvable.
    pub degenerate_flow_pixels: usize,
    /// Bounding box smaller than 3x3, so LBP segments are zero.
    pub tiny_roi: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeatures {
    pub node_id: usize,
    pub vector: Vec<f64>,
    pub flags: FeatureFlags,
}

/// Builds the descriptor of one instance.
pub fn node_features(
    frame_t: &Frame,
    frame_prev: &Frame,
    background: &BackgroundModel,
    inst: &Instance,
    layout: &FeatureLayout,
    window: usize,
) -> Result<NodeFeatures> {
    layout.validate()?;
    if frame_t.dims() != frame_prev.dims() {
        return Err(FeatureError::SizeMismatch(frame_t.dims(), frame_prev.dims()));
    }
    if frame_t.dims() != background.image.dims() {
        return Err(FeatureError::SizeMismatch(frame_t.dims(), background.image.dims()));
    }
    let flow = lucas_kanade(frame_prev, frame_t, &inst.mask_pixels, window)?;
    let mut vector = flow_features(&flow.vectors, layout)?;

    let roi_t = extract_roi(frame_t, inst.bbox)?;
    let roi_prev = extract_roi(frame_prev, inst.bbox)?;
    let roi_bg = extract_roi(&background.image, inst.bbox)?;
    let diff = Frame {
        data: roi_t.data.iter().zip(&roi_bg.data).map(|(a, b)| (a - b).abs()).collect(),
        ..roi_t.clone()
    };
    let mut tiny = false;
    for img in [&roi_t, &roi_prev, &roi_bg, &diff] {
        let (lbp, small) = lbp_histogram(img, layout.lbp_bins);
        tiny |= small;
        vector.extend(lbp);
        vector.extend(intensity_histogram(img, layout.intensity_bins).0);
    }
    debug_assert_eq!(vector.len(), layout.dimension());
    Ok(NodeFeatures {
        node_id: inst.node_id,
        vector,
        flags: FeatureFlags {
            degenerate_flow_pixels: flow.degenerate.iter().filter(|d| **d).count(),
            tiny_roi: tiny,
        },
    })
}

/// Descriptors for every instance of one video. The predecessor of frame
/// `t` is the previous frame in the sorted sequence; the first frame is
/// its own predecessor.
pub fn video_features(
    frames: &[Frame],
    background: &BackgroundModel,
    instances: &[Instance],
    layout: &FeatureLayout,
    window: usize,
) -> Result<Vec<NodeFeatures>> {
    let mut order: Vec<&Frame> = frames.iter().collect();
    order.sort_by_key(|f| f.frame_index);
    let position: HashMap<usize, usize> = order
        .iter()
        .enumerate()
        .map(|(i, f)| (f.frame_index, i))
        .collect();
    instances
        .par_iter()
        .map(|inst| {
            let &pos = position
                .get(&inst.frame_index)
                .ok_or_else(|| FeatureError::MissingFrame {
                    video: inst.video_id.clone(),
                    frame: inst.frame_index,
                })?;
            let prev = order[pos.saturating_sub(1)];
            node_features(order[pos], prev, background, inst, layout, window)
        })
        .collect()
}

/// `N x C` matrix of node descriptors; row `i` belongs to node `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub layout: FeatureLayout,
    pub data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(layout: FeatureLayout, rows: &[NodeFeatures]) -> Result<Self> {
        layout.validate()?;
        let c = layout.dimension();
        let mut data = Array2::zeros((rows.len(), c));
        for (i, row) in rows.iter().enumerate() {
            if row.node_id != i {
                return Err(FeatureError::NodeOrder { row: i, node_id: row.node_id });
            }
            if row.vector.len() != c {
                return Err(FeatureError::Length {
                    node: i,
                    found: row.vector.len(),
                    expected: c,
                });
            }
            for (j, v) in row.vector.iter().enumerate() {
                data[[i, j]] = *v;
            }
        }
        Ok(Self { layout, data })
    }

    pub fn nodes(&self) -> usize {
        self.data.nrows()
    }

    pub fn dimension(&self) -> usize {
        self.data.ncols()
    }

    /// Binary layout: magic, N, C, magnitude bins, orientation bins, LBP
    /// bins, intensity bins, magnitude_max (f32 bits), then `N*C` f32
    /// values row by row. Everything little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.layout;
        let header = [
            MATRIX_MAGIC,
            self.nodes() as u32,
            self.dimension() as u32,
            l.flow_magnitude_bins as u32,
            l.flow_orientation_bins as u32,
            l.lbp_bins as u32,
            l.intensity_bins as u32,
            (l.magnitude_max as f32).to_bits(),
        ];
        let mut out = Vec::with_capacity(4 * (header.len() + self.data.len()));
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in self.data.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| FeatureError::Format("truncated header".into()))
        };
        if word(0)? != MATRIX_MAGIC {
            return Err(FeatureError::Format("bad magic".into()));
        }
        let (n, c) = (word(1)? as usize, word(2)? as usize);
        let layout = FeatureLayout {
            flow_magnitude_bins: word(3)? as usize,
            flow_orientation_bins: word(4)? as usize,
            lbp_bins: word(5)? as usize,
            intensity_bins: word(6)? as usize,
            magnitude_max: f32::from_bits(word(7)?) as f64,
        };
        layout.validate()?;
        if layout.dimension() != c {
            return Err(FeatureError::Format(format!(
                "header C={c} disagrees with layout C={}",
                layout.dimension()
            )));
        }
        let body = &bytes[32..];
        if body.len() != 4 * n * c {
            return Err(FeatureError::Format("body length disagrees with N*C".into()));
        }
        let values: Vec<f64> = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        let data = Array2::from_shape_vec((n, c), values).expect("shape checked");
        Ok(Self { layout, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Debug export: `node,f0,f1,...`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("node");
        for j in 0..self.dimension() {
            let _ = write!(s, ",f{j}");
        }
        s.push('\n');
        for (i, row) in self.data.outer_iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// Rounds every entry to f32 precision, matching what `save` stores.
    pub fn quantized(mut self) -> Self {
        self.data.mapv_inplace(|v| v as f32 as f64);
        self
    }
}
