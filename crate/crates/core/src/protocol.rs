//! Node labeling, unseen-video splits, pixel-level scoring and Monte Carlo
//! repetition.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gcn::{self, Class, GcnError, GcnModel, TrainConfig, TrainHistory, CLASSES};
use crate::graph::NormalizedAdjacency;
use crate::media_io::{GroundTruthMask, GtLabel, Instance};
use crate::seed::derive_seed;

/// Training densities evaluated for every partition.
pub const DENSITIES: [f64; 4] = [0.001, 0.005, 0.05, 0.1];
/// Share of all nodes held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.01;
/// Challenge columns of the change-detection summary, in report order.
pub const CHALLENGES: [&str; 9] = ["BWT", "BSL", "CJI", "DBA", "IOM", "LFR", "PTZ", "SHW", "THL"];

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("instance {node} ({video} frame {frame}) has pixel ({row},{col}) outside the {width}x{height} ground truth")]
    DimensionMismatch {
        node: usize,
        video: String,
        frame: usize,
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },
    #[error("mask is {found:?}, ground truth is {expected:?}")]
    MaskSize {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("node ids must be 0..N in some order; got {0}")]
    NodeIds(String),
    #[error("density {0} is outside (0, 1)")]
    Density(f64),
    #[error("unseen video {0:?} is not in the catalog")]
    UnknownVideo(String),
    #[error("no unseen videos given")]
    NoUnseenVideos,
    #[error("split needs {needed} covered training-video nodes, only {available} available")]
    NotEnoughNodes { needed: usize, available: usize },
    #[error("split would be empty: |S| = {train}, |T| = {validation} for N = {nodes}")]
    EmptySplit {
        train: usize,
        validation: usize,
        nodes: usize,
    },
    #[error("repetitions must be at least 1")]
    Repetitions,
    #[error("prediction covers {found} nodes, expected {expected}")]
    PredictionLength { expected: usize, found: usize },
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ProtocolError>;

/// One-hot labels, background `[1,0]` and foreground `[0,1]`. Uncovered
/// rows are all-zero and must never be used as supervision.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    pub y: Array2<f64>,
    pub covered: Vec<bool>,
}

impl LabelMatrix {
    pub fn uncovered(n: usize) -> Self {
        Self {
            y: Array2::zeros((n, CLASSES)),
            covered: vec![false; n],
        }
    }

    pub fn nodes(&self) -> usize {
        self.covered.len()
    }

    pub fn set(&mut self, node: usize, class: Class) {
        self.y.row_mut(node).fill(0.0);
        self.y[[node, class.index()]] = 1.0;
        self.covered[node] = true;
    }

    pub fn class(&self, node: usize) -> Option<Class> {
        if !self.covered[node] {
            None
        } else if self.y[[node, 1]] == 1.0 {
            Some(Class::Foreground)
        } else {
            Some(Class::Background)
        }
    }

    /// Copy in which only `keep` remain covered.
    pub fn restricted(&self, keep: &[usize]) -> Self {
        let mut out = Self::uncovered(self.nodes());
        for &i in keep {
            if let Some(c) = self.class(i) {
                out.set(i, c);
            }
        }
        out
    }
}

fn check_node_ids(instances: &[Instance]) -> Result<()> {
    let mut seen = vec![false; instances.len()];
    for inst in instances {
        match seen.get_mut(inst.node_id) {
            Some(s) if !*s => *s = true,
            _ => return Err(ProtocolError::NodeIds(format!("node id {}", inst.node_id))),
        }
    }
    Ok(())
}

type GtIndex<'a> = HashMap<(&'a str, usize), &'a GroundTruthMask>;

fn index_ground_truth(ground_truth: &[GroundTruthMask]) -> GtIndex<'_> {
    ground_truth
        .iter()
        .map(|g| ((g.video_id.as_str(), g.frame_index), g))
        .collect()
}

/// Foreground iff strictly more than half of the known GT pixels under the
/// mask are foreground. Nodes without GT for their frame, or whose mask is
/// entirely GT-unknown, stay uncovered.
pub fn label_nodes(instances: &[Instance], ground_truth: &[GroundTruthMask]) -> Result<LabelMatrix> {
    check_node_ids(instances)?;
    let gt = index_ground_truth(ground_truth);
    let mut labels = LabelMatrix::uncovered(instances.len());
    for inst in instances {
        let Some(mask) = gt.get(&(inst.video_id.as_str(), inst.frame_index)) else {
            continue;
        };
        let (mut fg, mut known) = (0usize, 0usize);
        for p in &inst.mask_pixels {
            if p.row >= mask.height || p.col >= mask.width {
                return Err(ProtocolError::DimensionMismatch {
                    node: inst.node_id,
                    video: inst.video_id.clone(),
                    frame: inst.frame_index,
                    row: p.row,
                    col: p.col,
                    width: mask.width,
                    height: mask.height,
                });
            }
            match mask.get(p.row, p.col) {
                GtLabel::Foreground => {
                    fg += 1;
                    known += 1;
                }
                GtLabel::Background => known += 1,
                GtLabel::Unknown => {}
            }
        }
        if known > 0 {
            let class = if 2 * fg > known { Class::Foreground } else { Class::Background };
            labels.set(inst.node_id, class);
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub node_id: usize,
    pub video_id: String,
    pub frame_index: usize,
    pub label: u32,
}

/// Maps node ids to their video, frame and segmenter label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NodeCatalog {
    pub entries: Vec<CatalogEntry>,
}

impl NodeCatalog {
    pub fn from_instances(instances: &[Instance]) -> Result<Self> {
        check_node_ids(instances)?;
        let mut entries: Vec<CatalogEntry> = instances
            .iter()
            .map(|i| CatalogEntry {
                node_id: i.node_id,
                video_id: i.video_id.clone(),
                frame_index: i.frame_index,
                label: i.label,
            })
            .collect();
        entries.sort_by_key(|e| e.node_id);
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn videos(&self) -> BTreeSet<&str> {
        self.entries.iter().map(|e| e.video_id.as_str()).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("node_id,video,frame,label\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{},{}", e.node_id, e.video_id, e.frame_index, e.label);
        }
        s
    }
}

/// One training/validation/test partition of the node set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub partition_id: usize,
    pub unseen_videos: Vec<String>,
    pub density: f64,
    pub seed: u64,
    /// S, sorted.
    pub train: Vec<usize>,
    /// T, sorted.
    pub validation: Vec<usize>,
    /// U: every node of the unseen videos, sorted.
    pub unseen: Vec<usize>,
}

impl SplitSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// `round(fraction * n)`, halves away from zero.
pub fn sample_size(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Samples S and T uniformly without replacement from the covered nodes of
/// the videos not listed in `unseen_videos`.
pub fn make_split(
    catalog: &NodeCatalog,
    labels: &LabelMatrix,
    unseen_videos: &[String],
    density: f64,
    seed: u64,
    partition_id: usize,
) -> Result<SplitSpec> {
    if !(density > 0.0 && density < 1.0) {
        return Err(ProtocolError::Density(density));
    }
    if unseen_videos.is_empty() {
        return Err(ProtocolError::NoUnseenVideos);
    }
    let videos = catalog.videos();
    if let Some(v) = unseen_videos.iter().find(|v| !videos.contains(v.as_str())) {
        return Err(ProtocolError::UnknownVideo(v.clone()));
    }
    if labels.nodes() != catalog.len() {
        return Err(ProtocolError::NodeIds(format!(
            "catalog has {} nodes, labels {}",
            catalog.len(),
            labels.nodes()
        )));
    }
    let unseen_set: BTreeSet<&str> = unseen_videos.iter().map(String::as_str).collect();
    let n = catalog.len();
    let n_train = sample_size(density, n);
    let n_val = sample_size(VALIDATION_FRACTION, n);
    if n_train == 0 || n_val == 0 {
        return Err(ProtocolError::EmptySplit {
            train: n_train,
            validation: n_val,
            nodes: n,
        });
    }

    let mut unseen = Vec::new();
    let mut pool = Vec::new();
    for e in &catalog.entries {
        if unseen_set.contains(e.video_id.as_str()) {
            unseen.push(e.node_id);
        } else if labels.covered[e.node_id] {
            pool.push(e.node_id);
        }
    }
    if pool.len() < n_train + n_val {
        return Err(ProtocolError::NotEnoughNodes {
            needed: n_train + n_val,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = pool.partial_shuffle(&mut rng, n_train + n_val);
    let mut train = chosen[..n_train].to_vec();
    let mut validation = chosen[n_train..].to_vec();
    train.sort_unstable();
    validation.sort_unstable();
    unseen.sort_unstable();
    let mut unseen_videos = unseen_videos.to_vec();
    unseen_videos.sort();
    unseen_videos.dedup();
    Ok(SplitSpec {
        partition_id,
        unseen_videos,
        density,
        seed,
        train,
        validation,
        unseen,
    })
}

/// Row-major binary mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Union of the pixels of every instance predicted foreground. `classes` is
/// indexed by node id. Pixels outside the canvas are ignored.
pub fn render_prediction(
    width: usize,
    height: usize,
    instances: &[&Instance],
    classes: &[Class],
) -> Result<BinaryMask> {
    let mut mask = BinaryMask::empty(width, height);
    for inst in instances {
        let class = classes.get(inst.node_id).ok_or(ProtocolError::PredictionLength {
            expected: inst.node_id + 1,
            found: classes.len(),
        })?;
        if *class == Class::Foreground {
            for p in &inst.mask_pixels {
                if p.row < height && p.col < width {
                    mask.data[p.row * width + p.col] = true;
                }
            }
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PixelCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for PixelCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl PixelCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// Harmonic mean of precision and recall, 0 when both are 0.
    pub fn f_measure(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FScore {
    pub counts: PixelCounts,
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

impl From<PixelCounts> for FScore {
    fn from(counts: PixelCounts) -> Self {
        Self {
            counts,
            precision: counts.precision(),
            recall: counts.recall(),
            f: counts.f_measure(),
        }
    }
}

/// Pixel counts of `pred` against `gt`; GT-unknown pixels are not counted.
pub fn f_measure(pred: &BinaryMask, gt: &GroundTruthMask) -> Result<FScore> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(ProtocolError::MaskSize {
            expected: (gt.width, gt.height),
            found: (pred.width, pred.height),
        });
    }
    let mut c = PixelCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (_, GtLabel::Unknown) => {}
            (true, GtLabel::Foreground) => c.tp += 1,
            (true, GtLabel::Background) => c.fp += 1,
            (false, GtLabel::Foreground) => c.fn_ += 1,
            (false, GtLabel::Background) => {}
        }
    }
    Ok(c.into())
}

/// Category-name to summary-column mapping for change-detection videos named
/// `<category>/<video>`. Unknown categories are kept verbatim; ids without a
/// category map to themselves.
pub fn challenge_of(video_id: &str) -> String {
    let category = video_id.split_once('/').map_or(video_id, |(c, _)| c);
    let abbr = match category {
        "badWeather" => "BWT",
        "baseline" => "BSL",
        "cameraJitter" => "CJI",
        "dynamicBackground" => "DBA",
        "intermittentObjectMotion" => "IOM",
        "lowFramerate" => "LFR",
        "PTZ" => "PTZ",
        "shadow" => "SHW",
        "thermal" => "THL",
        other => other,
    };
    abbr.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub challenge: String,
    /// Frames with ground truth that contributed counts.
    pub frames_scored: usize,
    pub score: FScore,
}

/// Scores one video: every frame that has ground truth is rendered from the
/// predicted classes and its counts are summed into one video total. Frames
/// with neither GT nor predicted foreground add nothing and are not counted.
pub fn evaluate_video(
    video_id: &str,
    instances: &[Instance],
    classes: &[Class],
    ground_truth: &[GroundTruthMask],
) -> Result<VideoScore> {
    let mut by_frame: BTreeMap<usize, Vec<&Instance>> = BTreeMap::new();
    for inst in instances.iter().filter(|i| i.video_id == video_id) {
        by_frame.entry(inst.frame_index).or_default().push(inst);
    }
    let frames: Vec<&GroundTruthMask> = ground_truth.iter().filter(|g| g.video_id == video_id).collect();
    let per_frame: Vec<FScore> = frames
        .par_iter()
        .map(|gt| {
            let insts = by_frame.get(&gt.frame_index).map_or(&[][..], Vec::as_slice);
            let mask = render_prediction(gt.width, gt.height, insts, classes)?;
            f_measure(&mask, gt)
        })
        .collect::<Result<_>>()?;
    let mut total = PixelCounts::default();
    let mut frames_scored = 0;
    for s in per_frame {
        if !s.counts.is_empty() {
            total += s.counts;
            frames_scored += 1;
        }
    }
    Ok(VideoScore {
        video_id: video_id.to_owned(),
        challenge: challenge_of(video_id),
        frames_scored,
        score: total.into(),
    })
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Unweighted per-challenge means of video F-measures and their mean.
fn challenge_means<'a>(videos: impl Iterator<Item = (&'a str, f64)>) -> (BTreeMap<String, f64>, f64) {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (c, f) in videos {
        groups.entry(c.to_owned()).or_default().push(f);
    }
    let means: BTreeMap<String, f64> = groups.into_iter().map(|(c, fs)| (c, mean(fs))).collect();
    let overall = mean(means.values().copied());
    (means, overall)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoScore>,
    pub challenges: BTreeMap<String, f64>,
    pub overall: f64,
}

impl EvalReport {
    pub fn from_videos(mut videos: Vec<VideoScore>) -> Self {
        videos.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        let (challenges, overall) = challenge_means(videos.iter().map(|v| (v.challenge.as_str(), v.score.f)));
        Self {
            videos,
            challenges,
            overall,
        }
    }

    /// `video,challenge,TP,FP,FN,precision,recall,f`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("video,challenge,TP,FP,FN,precision,recall,f\n");
        for v in &self.videos {
            let c = v.score.counts;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                v.video_id, v.challenge, c.tp, c.fp, c.fn_, v.score.precision, v.score.recall, v.score.f
            );
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub challenge: String,
    pub f_per_repetition: Vec<f64>,
    pub mean_f: f64,
    pub best_f: f64,
}

/// Repetition statistics: per video, the mean and the best F over the
/// repetitions, then unweighted challenge and overall means of each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub repetitions: usize,
    pub videos: Vec<VideoSummary>,
    pub challenge_mean: BTreeMap<String, f64>,
    pub challenge_best: BTreeMap<String, f64>,
    pub overall_mean: f64,
    pub overall_best: f64,
}

impl MonteCarloSummary {
    pub fn from_reports(reports: &[EvalReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(ProtocolError::Repetitions);
        }
        let mut per_video: BTreeMap<&str, (&str, Vec<f64>)> = BTreeMap::new();
        for r in reports {
            for v in &r.videos {
                per_video
                    .entry(v.video_id.as_str())
                    .or_insert_with(|| (v.challenge.as_str(), Vec::new()))
                    .1
                    .push(v.score.f);
            }
        }
        let videos: Vec<VideoSummary> = per_video
            .into_iter()
            .map(|(id, (challenge, fs))| VideoSummary {
                video_id: id.to_owned(),
                challenge: challenge.to_owned(),
                mean_f: mean(fs.iter().copied()),
                best_f: fs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                f_per_repetition: fs,
            })
            .collect();
        let (challenge_mean, overall_mean) = challenge_means(videos.iter().map(|v| (v.challenge.as_str(), v.mean_f)));
        let (challenge_best, overall_best) = challenge_means(videos.iter().map(|v| (v.challenge.as_str(), v.best_f)));
        Ok(Self {
            repetitions: reports.len(),
            videos,
            challenge_mean,
            challenge_best,
            overall_mean,
            overall_best,
        })
    }

    /// Summary in the fixed challenge-column layout. Absent challenges are
    /// `null`; categories outside the nine columns are listed under `other`.
    pub fn to_summary_json(&self) -> Result<String> {
        let column = |m: &BTreeMap<String, f64>| {
            let mut cols = serde_json::Map::new();
            for c in CHALLENGES {
                cols.insert(c.to_owned(), m.get(c).map_or(serde_json::Value::Null, |&f| f.into()));
            }
            cols
        };
        let other: BTreeMap<&String, (f64, f64)> = self
            .challenge_mean
            .iter()
            .filter(|(c, _)| !CHALLENGES.contains(&c.as_str()))
            .map(|(c, &m)| (c, (m, self.challenge_best[c])))
            .collect();
        let value = serde_json::json!({
            "repetitions": self.repetitions,
            "mean": { "challenges": column(&self.challenge_mean), "overall": self.overall_mean },
            "best": { "challenges": column(&self.challenge_best), "overall": self.overall_best },
            "other": other.into_iter().map(|(c, (m, b))| (c.clone(), serde_json::json!({"mean": m, "best": b}))).collect::<serde_json::Map<_, _>>(),
        });
        Ok(serde_json::to_string_pretty(&value)?)
    }
}

/// Fixed inputs of one (partition, density) cell.
pub struct Experiment<'a> {
    pub features: ArrayView2<'a, f64>,
    pub adjacency: &'a NormalizedAdjacency,
    pub labels: &'a LabelMatrix,
    pub catalog: &'a NodeCatalog,
    pub instances: &'a [Instance],
    pub ground_truth: &'a [GroundTruthMask],
    pub unseen_videos: &'a [String],
    pub partition_id: usize,
    pub density: f64,
    pub train: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub split: SplitSpec,
    pub model: GcnModel,
    pub history: TrainHistory,
    pub report: EvalReport,
}

/// Seeds of repetition `rep`: (split seed, training seed).
pub fn repetition_seeds(base_seed: u64, partition_id: usize, density: f64, rep: usize) -> (u64, u64) {
    let coords = [partition_id as u64, density.to_bits(), rep as u64];
    (derive_seed(base_seed, "split", &coords), derive_seed(base_seed, "train", &coords))
}

/// Draws the split and trains on it. Training only sees the labels of S
/// and T.
pub fn train_split(exp: &Experiment<'_>, split_seed: u64, train_seed: u64) -> Result<(SplitSpec, GcnModel, TrainHistory)> {
    let split = make_split(
        exp.catalog,
        exp.labels,
        exp.unseen_videos,
        exp.density,
        split_seed,
        exp.partition_id,
    )?;
    let visible: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
    let supervision = exp.labels.restricted(&visible);
    let config = TrainConfig {
        seed: train_seed,
        ..exp.train.clone()
    };
    let (model, history) = gcn::train(
        exp.features,
        exp.adjacency,
        &supervision,
        &split.train,
        &split.validation,
        &config,
    )?;
    Ok((split, model, history))
}

/// Predicts every node and scores the unseen videos of `split`.
pub fn score_unseen(exp: &Experiment<'_>, split: &SplitSpec, model: &GcnModel) -> Result<EvalReport> {
    let prediction = gcn::predict(model, exp.features, exp.adjacency)?;
    let videos = split
        .unseen_videos
        .iter()
        .map(|v| evaluate_video(v, exp.instances, &prediction.classes, exp.ground_truth))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_videos(videos))
}

pub fn run_once(exp: &Experiment<'_>, split_seed: u64, train_seed: u64) -> Result<RunOutcome> {
    let (split, model, history) = train_split(exp, split_seed, train_seed)?;
    let report = score_unseen(exp, &split, &model)?;
    Ok(RunOutcome {
        split,
        model,
        history,
        report,
    })
}

/// `repetitions` independent runs with seeds derived from `base_seed`.
pub fn monte_carlo(
    exp: &Experiment<'_>,
    repetitions: usize,
    base_seed: u64,
) -> Result<(Vec<RunOutcome>, MonteCarloSummary)> {
    if repetitions == 0 {
        return Err(ProtocolError::Repetitions);
    }
    let runs = (0..repetitions)
        .map(|rep| {
            let (s, t) = repetition_seeds(base_seed, exp.partition_id, exp.density, rep);
            run_once(exp, s, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<EvalReport> = runs.iter().map(|r| r.report.clone()).collect();
    let summary = MonteCarloSummary::from_reports(&reports)?;
    Ok((runs, summary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::Pixel;
    use proptest::prelude::*;
    use rand::Rng;

    fn gt(video: &str, frame: usize, w: usize, h: usize, fg: &[(usize, usize)], unknown: &[(usize, usize)]) -> GroundTruthMask {
        let mut data = vec![GtLabel::Background; w * h];
        for &(r, c) in fg {
            data[r * w + c] = GtLabel::Foreground;
        }
        for &(r, c) in unknown {
            data[r * w + c] = GtLabel::Unknown;
        }
        GroundTruthMask {
            video_id: video.into(),
            frame_index: frame,
            width: w,
            height: h,
            data,
        }
    }

    fn inst(video: &str, frame: usize, node: usize, px: &[(usize, usize)]) -> Instance {
        let pixels = px.iter().map(|&(r, c)| Pixel::new(r, c)).collect();
        Instance::from_pixels(video, frame, 1, pixels, node).unwrap()
    }

    #[test]
    fn labeling_majority_rule() {
        let truth = [gt("v", 1, 4, 4, &[(0, 0), (0, 1)], &[(3, 3)])];
        let insts = [
            inst("v", 1, 0, &[(0, 0), (0, 1)]),
            inst("v", 1, 1, &[(2, 2)]),
            inst("v", 1, 2, &[(0, 1), (1, 1)]),
            inst("v", 1, 3, &[(3, 3)]),
            inst("v", 1, 4, &[(0, 0), (3, 3)]),
            inst("v", 2, 5, &[(0, 0)]),
        ];
        let y = label_nodes(&insts, &truth).unwrap();
        assert_eq!(y.class(0), Some(Class::Foreground));
        assert_eq!(y.class(1), Some(Class::Background));
        // exact tie is background
        assert_eq!(y.class(2), Some(Class::Background));
        // only unknown pixels
        assert_eq!(y.class(3), None);
        // unknown pixels are excluded from the vote
        assert_eq!(y.class(4), Some(Class::Foreground));
        // no GT for the frame
        assert_eq!(y.class(5), None);
        assert_eq!(y.y.row(0).to_vec(), vec![0.0, 1.0]);
        assert_eq!(y.y.row(1).to_vec(), vec![1.0, 0.0]);
        assert_eq!(y.y.row(3).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn labeling_errors() {
        let truth = [gt("v", 1, 2, 2, &[], &[])];
        assert!(matches!(
            label_nodes(&[inst("v", 1, 0, &[(2, 0)])], &truth),
            Err(ProtocolError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            label_nodes(&[inst("v", 1, 1, &[(0, 0)])], &truth),
            Err(ProtocolError::NodeIds(_))
        ));
    }

    fn catalog(videos: &[(&str, usize)]) -> (NodeCatalog, LabelMatrix) {
        let mut entries = Vec::new();
        for (v, count) in videos {
            for f in 0..*count {
                entries.push(CatalogEntry {
                    node_id: entries.len(),
                    video_id: (*v).into(),
                    frame_index: f,
                    label: 1,
                });
            }
        }
        let n = entries.len();
        let mut labels = LabelMatrix::uncovered(n);
        for i in 0..n {
            labels.set(i, if i % 3 == 0 { Class::Foreground } else { Class::Background });
        }
        (NodeCatalog { entries }, labels)
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let (cat, labels) = catalog(&[("a", 400), ("b", 400), ("c", 200)]);
        let s = make_split(&cat, &labels, &["c".into()], 0.005, 1, 0).unwrap();
        assert_eq!(s.train.len(), 5);
        assert_eq!(s.validation.len(), 10);
        assert_eq!(s.unseen, (800..1000).collect::<Vec<_>>());
        assert!(s.train.iter().all(|i| !s.validation.contains(i) && *i < 800));
        let again = make_split(&cat, &labels, &["c".into()], 0.005, 1, 0).unwrap();
        assert_eq!(s, again);
        let other = make_split(&cat, &labels, &["c".into()], 0.005, 2, 0).unwrap();
        assert_ne!(s.train, other.train);
        assert_eq!(SplitSpec::from_json(&s.to_json().unwrap()).unwrap(), s);
    }

    #[test]
    fn split_skips_uncovered_nodes() {
        let (cat, mut labels) = catalog(&[("a", 100), ("b", 100)]);
        for i in 0..50 {
            labels.covered[i] = false;
        }
        let s = make_split(&cat, &labels, &["b".into()], 0.1, 3, 0).unwrap();
        assert!(s.train.iter().chain(&s.validation).all(|&i| (50..100).contains(&i)));
    }

    #[test]
    fn split_errors() {
        let (cat, labels) = catalog(&[("a", 60), ("b", 60)]);
        let unseen = ["b".to_owned()];
        assert!(matches!(make_split(&cat, &labels, &unseen, 0.0, 0, 0), Err(ProtocolError::Density(_))));
        assert!(matches!(make_split(&cat, &labels, &unseen, 1.0, 0, 0), Err(ProtocolError::Density(_))));
        assert!(matches!(make_split(&cat, &labels, &[], 0.1, 0, 0), Err(ProtocolError::NoUnseenVideos)));
        assert!(matches!(
            make_split(&cat, &labels, &["z".into()], 0.1, 0, 0),
            Err(ProtocolError::UnknownVideo(_))
        ));
        assert!(matches!(
            make_split(&cat, &labels, &unseen, 0.6, 0, 0),
            Err(ProtocolError::NotEnoughNodes { needed: 73, available: 60 })
        ));
        let (small, small_labels) = catalog(&[("a", 10), ("b", 10)]);
        assert!(matches!(
            make_split(&small, &small_labels, &unseen, 0.1, 0, 0),
            Err(ProtocolError::EmptySplit { .. })
        ));
    }

    #[test]
    fn large_catalog_training_size() {
        assert_eq!(sample_size(0.001, 258_956), 259);
        assert_eq!(sample_size(0.005, 1000), 5);
    }

    #[test]
    fn render_cases() {
        let a = inst("v", 1, 0, &[(0, 0), (0, 1)]);
        let b = inst("v", 1, 1, &[(0, 1), (1, 1)]);
        let c = inst("v", 1, 2, &[(1, 0)]);
        let classes = [Class::Foreground, Class::Foreground, Class::Background];
        assert_eq!(render_prediction(2, 2, &[], &classes).unwrap().count(), 0);
        let one = render_prediction(2, 2, &[&a], &classes).unwrap();
        assert_eq!(one.data, vec![true, true, false, false]);
        let all = render_prediction(2, 2, &[&a, &b, &c], &classes).unwrap();
        assert_eq!(all.data, vec![true, true, false, true]);
        assert!(render_prediction(2, 2, &[&c], &classes[..1]).is_err());
    }

    #[test]
    fn f_measure_cases() {
        let truth = gt("v", 1, 2, 2, &[(0, 0), (0, 1)], &[]);
        let same = BinaryMask {
            width: 2,
            height: 2,
            data: vec![true, true, false, false],
        };
        let s = f_measure(&same, &truth).unwrap();
        assert_eq!((s.precision, s.recall, s.f), (1.0, 1.0, 1.0));
        let disjoint = BinaryMask {
            data: vec![false, false, true, true],
            ..same.clone()
        };
        assert_eq!(f_measure(&disjoint, &truth).unwrap().f, 0.0);
        let c = PixelCounts { tp: 2, fp: 1, fn_: 1 };
        assert!((c.precision() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.recall() - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.f_measure() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(PixelCounts { tp: 0, fp: 0, fn_: 3 }.precision(), 0.0);
        assert!(f_measure(&BinaryMask::empty(3, 2), &truth).is_err());
    }

    #[test]
    fn unknown_pixels_are_not_counted() {
        let truth = gt("v", 1, 2, 1, &[], &[(0, 0)]);
        let pred = BinaryMask {
            width: 2,
            height: 1,
            data: vec![true, false],
        };
        assert!(f_measure(&pred, &truth).unwrap().counts.is_empty());
    }

    #[test]
    fn video_counts_are_frame_sums() {
        let truth = [
            gt("cam", 1, 3, 1, &[(0, 0)], &[]),
            gt("cam", 2, 3, 1, &[(0, 1), (0, 2)], &[]),
            gt("cam", 3, 3, 1, &[], &[]),
        ];
        let insts = [
            inst("cam", 1, 0, &[(0, 0), (0, 1)]),
            inst("cam", 2, 1, &[(0, 2)]),
            inst("cam", 4, 2, &[(0, 0)]),
        ];
        let classes = [Class::Foreground; 3];
        let v = evaluate_video("cam", &insts, &classes, &truth).unwrap();
        assert_eq!(v.score.counts, PixelCounts { tp: 2, fp: 1, fn_: 1 });
        // frame 3 has neither GT nor predicted foreground
        assert_eq!(v.frames_scored, 2);
    }

    #[test]
    fn aggregation_and_summary() {
        let score = |video: &str, f_counts: PixelCounts| VideoScore {
            video_id: video.into(),
            challenge: challenge_of(video),
            frames_scored: 1,
            score: f_counts.into(),
        };
        let perfect = PixelCounts { tp: 4, fp: 0, fn_: 0 };
        let zero = PixelCounts { tp: 0, fp: 1, fn_: 1 };
        let r1 = EvalReport::from_videos(vec![
            score("baseline/highway", perfect),
            score("baseline/office", zero),
            score("shadow/cubicle", perfect),
        ]);
        assert_eq!(r1.challenges["BSL"], 0.5);
        assert_eq!(r1.challenges["SHW"], 1.0);
        assert_eq!(r1.overall, 0.75);
        assert!(r1.to_csv().starts_with("video,challenge,TP,FP,FN,precision,recall,f\nbaseline/highway,BSL,4,0,0,1,1,1\n"));

        let r2 = EvalReport::from_videos(vec![
            score("baseline/highway", zero),
            score("baseline/office", perfect),
            score("shadow/cubicle", perfect),
        ]);
        let mc = MonteCarloSummary::from_reports(&[r1.clone(), r2]).unwrap();
        assert_eq!(mc.challenge_mean["BSL"], 0.5);
        assert_eq!(mc.challenge_best["BSL"], 1.0);
        assert_eq!(mc.overall_best, 1.0);
        let single = MonteCarloSummary::from_reports(&[r1]).unwrap();
        assert_eq!(single.overall_mean, single.overall_best);
        let json: serde_json::Value = serde_json::from_str(&single.to_summary_json().unwrap()).unwrap();
        assert_eq!(json["best"]["challenges"].as_object().unwrap().len(), 9);
        assert!(json["best"]["challenges"]["THL"].is_null());
        assert!(MonteCarloSummary::from_reports(&[]).is_err());
    }

    #[test]
    fn challenge_names() {
        assert_eq!(challenge_of("badWeather/skating"), "BWT");
        assert_eq!(challenge_of("intermittentObjectMotion/sofa"), "IOM");
        assert_eq!(challenge_of("syn0"), "syn0");
        assert_eq!(challenge_of("custom/x"), "custom");
    }

    #[test]
    fn restricted_labels_hide_other_nodes() {
        let (_, labels) = catalog(&[("a", 6)]);
        let r = labels.restricted(&[1, 3]);
        assert_eq!(r.covered, vec![false, true, false, true, false, false]);
        assert_eq!(r.y.row(0).sum(), 0.0);
        assert_eq!(r.class(3), labels.class(3));
    }

    fn naive_counts(pred: &[bool], truth: &[u8]) -> (u64, u64, u64) {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..pred.len() {
            if truth[i] == 2 {
                continue;
            }
            if pred[i] && truth[i] == 1 {
                tp += 1;
            }
            if pred[i] && truth[i] == 0 {
                fp += 1;
            }
            if !pred[i] && truth[i] == 1 {
                fn_ += 1;
            }
        }
        (tp, fp, fn_)
    }

    proptest! {
        #[test]
        fn f_measure_matches_counting(w in 1usize..64, h in 1usize..64, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<bool> = (0..w * h).map(|_| rng.random()).collect();
            let codes: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..3)).collect();
            let truth = GroundTruthMask {
                video_id: "v".into(),
                frame_index: 0,
                width: w,
                height: h,
                data: codes.iter().map(|c| [GtLabel::Background, GtLabel::Foreground, GtLabel::Unknown][*c as usize]).collect(),
            };
            let s = f_measure(&BinaryMask { width: w, height: h, data: pred.clone() }, &truth).unwrap();
            let (tp, fp, fn_) = naive_counts(&pred, &codes);
            prop_assert_eq!((s.counts.tp, s.counts.fp, s.counts.fn_), (tp, fp, fn_));
            prop_assert!((0.0..=1.0).contains(&s.f));
        }

        #[test]
        fn splits_respect_protocol(
            sizes in prop::collection::vec(20usize..200, 2..6),
            unseen_count in 1usize..3,
            density_idx in 0usize..4,
            seed in any::<u64>(),
        ) {
            let names: Vec<String> = (0..sizes.len()).map(|i| format!("v{i}")).collect();
            let spec: Vec<(&str, usize)> = names.iter().map(String::as_str).zip(sizes.iter().copied()).collect();
            let (cat, labels) = catalog(&spec);
            let unseen: Vec<String> = names[..unseen_count.min(names.len() - 1)].to_vec();
            let density = DENSITIES[density_idx];
            match make_split(&cat, &labels, &unseen, density, seed, 0) {
                Ok(s) => {
                    let n = cat.len();
                    prop_assert_eq!(s.train.len(), sample_size(density, n));
                    prop_assert_eq!(s.validation.len(), sample_size(VALIDATION_FRACTION, n));
                    let tr: BTreeSet<_> = s.train.iter().collect();
                    let va: BTreeSet<_> = s.validation.iter().collect();
                    let un: BTreeSet<_> = s.unseen.iter().collect();
                    prop_assert!(tr.is_disjoint(&va) && tr.is_disjoint(&un) && va.is_disjoint(&un));
                    for &i in s.train.iter().chain(&s.validation) {
                        prop_assert!(!unseen.contains(&cat.entries[i].video_id));
                    }
                }
                Err(ProtocolError::EmptySplit { .. }) | Err(ProtocolError::NotEnoughNodes { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
