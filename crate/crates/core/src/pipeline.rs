//! Run configuration and the on-disk stages: dataset loading, features,
//! graph, training and evaluation.
//!
//! Stage outputs under `<output_dir>/cache/` are keyed by a hash of the
//! configuration that produced them and reused on later runs. All
//! randomness derives from `base_seed` through [`crate::seed::derive_seed`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::background::{default_stride, median_background, BackgroundError, DEFAULT_MAX_SAMPLES};
use crate::features::{video_features, FeatureError, FeatureLayout, FeatureMatrix, NodeFeatures};
use crate::gcn::{GcnError, GcnModel, TrainConfig};
use crate::graph::{build_graph, load_adjacency, normalize, normalize_adjacency, save_graph, GraphError, NormalizedAdjacency};
use crate::media_io::{
    self, format_instances, load_ground_truth, load_instances, load_label_maps, load_sequence, Frame, FramePattern,
    GroundTruthMask, Instance, MediaError, SyntheticSpec, SyntheticVideo,
};
use crate::protocol::{
    self, label_nodes, repetition_seeds, EvalReport, Experiment, LabelMatrix, MonteCarloSummary, NodeCatalog,
    ProtocolError, SplitSpec,
};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_WINDOW: usize = 5;
pub const DEFAULT_REPETITIONS: usize = 3;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("video {video}: {source}")]
    Media { video: String, source: MediaError },
    #[error("video {video}: {source}")]
    Background { video: String, source: BackgroundError },
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Dataset(#[from] MediaError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, contents).map_err(io_err(path))
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Where the inputs live. Path templates may contain `{video}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub videos: Vec<String>,
    /// Directory of input frames.
    pub frames: String,
    #[serde(default = "default_frame_pattern")]
    pub frame_pattern: String,
    /// Either a run-length instance file or a directory of label maps.
    pub instances: String,
    #[serde(default = "default_label_pattern")]
    pub instance_pattern: String,
    /// Directory of ground-truth masks.
    pub ground_truth: String,
    #[serde(default = "default_gt_pattern")]
    pub gt_pattern: String,
}

fn default_frame_pattern() -> String {
    "in*.png".into()
}
fn default_label_pattern() -> String {
    "*.png".into()
}
fn default_gt_pattern() -> String {
    "gt*.png".into()
}

impl DataConfig {
    fn path(&self, template: &str, video: &str) -> PathBuf {
        PathBuf::from(template.replace("{video}", video))
    }

    pub fn frames_dir(&self, video: &str) -> PathBuf {
        self.path(&self.frames, video)
    }

    pub fn instances_path(&self, video: &str) -> PathBuf {
        self.path(&self.instances, video)
    }

    pub fn ground_truth_dir(&self, video: &str) -> PathBuf {
        self.path(&self.ground_truth, video)
    }

    fn resolve(&mut self, base: &Path) {
        for t in [&mut self.frames, &mut self.instances, &mut self.ground_truth] {
            if Path::new(t.as_str()).is_relative() {
                *t = base.join(&*t).to_string_lossy().into_owned();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    pub unseen: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackgroundConfig {
    pub max_samples: usize,
    /// `None` picks the smallest stride that respects `max_samples`.
    pub stride: Option<usize>,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            max_samples: DEFAULT_MAX_SAMPLES,
            stride: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    #[serde(flatten)]
    pub layout: FeatureLayout,
    /// Lucas-Kanade window side, odd.
    pub window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            layout: FeatureLayout::default(),
            window: DEFAULT_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_densities")]
    pub densities: Vec<f64>,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    pub data: DataConfig,
    /// Empty means one partition per video, each video unseen in turn.
    #[serde(default)]
    pub partitions: Vec<Partition>,
    #[serde(default)]
    pub background: BackgroundConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    /// `seed` is ignored; per-run seeds come from `base_seed`.
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_k() -> usize {
    DEFAULT_K
}
fn default_densities() -> Vec<f64> {
    protocol::DENSITIES.to_vec()
}
fn default_repetitions() -> usize {
    DEFAULT_REPETITIONS
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn hash_json(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("config values serialize");
    hex(&Sha256::digest(bytes)[..8])
}

impl RunConfig {
    /// Parses a TOML config. Relative paths are taken relative to the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(&read_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Checks values and that every referenced input exists.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.data.videos.is_empty() {
            return bad("data.videos is empty".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if let Some(d) = self.densities.iter().find(|d| !(**d > 0.0 && **d < 1.0)) {
            return bad(format!("density {d} is outside (0, 1)"));
        }
        self.features.layout.validate()?;
        self.train.validate()?;
        for p in &self.partitions {
            if let Some(v) = p.unseen.iter().find(|v| !self.data.videos.contains(v)) {
                return bad(format!("partition lists unknown video {v:?}"));
            }
        }
        for v in &self.data.videos {
            for path in [
                self.data.frames_dir(v),
                self.data.instances_path(v),
                self.data.ground_truth_dir(v),
            ] {
                if !path.exists() {
                    return bad(format!("{} does not exist", path.display()));
                }
            }
        }
        Ok(())
    }

    pub fn partitions(&self) -> Vec<Partition> {
        if self.partitions.is_empty() {
            self.data
                .videos
                .iter()
                .map(|v| Partition { unseen: vec![v.clone()] })
                .collect()
        } else {
            self.partitions.clone()
        }
    }

    /// Identifies the feature stage inputs.
    pub fn features_hash(&self) -> String {
        hash_json(&(&self.data, &self.background, &self.features))
    }

    pub fn graph_hash(&self) -> String {
        hash_json(&(self.features_hash(), self.k))
    }

    pub fn config_hash(&self) -> String {
        hash_json(self)
    }

    pub fn features_dir(&self) -> PathBuf {
        self.output_dir.join("cache").join(format!("features-{}", self.features_hash()))
    }

    pub fn graph_dir(&self) -> PathBuf {
        self.output_dir.join("cache").join(format!("graph-{}", self.graph_hash()))
    }

    pub fn cell_dir(&self, partition: usize, density: f64) -> PathBuf {
        self.output_dir.join("runs").join(format!("p{partition:02}")).join(format!("d{density}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoData {
    pub video_id: String,
    pub frames: Vec<Frame>,
    pub instances: Vec<Instance>,
    pub ground_truth: Vec<GroundTruthMask>,
}

impl From<SyntheticVideo> for VideoData {
    fn from(v: SyntheticVideo) -> Self {
        Self {
            video_id: v.video_id,
            frames: v.frames,
            instances: v.instances,
            ground_truth: v.ground_truth,
        }
    }
}

fn pattern(p: &str) -> Result<FramePattern> {
    FramePattern::parse(p).ok_or_else(|| PipelineError::Config(format!("pattern {p:?} needs exactly one '*'")))
}

/// Loads one video's frames, instances and ground truth.
pub fn load_video(data: &DataConfig, video: &str) -> Result<VideoData> {
    let media = |source| PipelineError::Media {
        video: video.to_owned(),
        source,
    };
    let frames = load_sequence(&data.frames_dir(video), &pattern(&data.frame_pattern)?).map_err(media)?;
    let inst_path = data.instances_path(video);
    let mut instances = if inst_path.is_dir() {
        load_label_maps(&inst_path, &pattern(&data.instance_pattern)?, video).map_err(media)?
    } else {
        load_instances(&inst_path).map_err(media)?
    };
    instances.retain(|i| i.video_id == video);
    let ground_truth =
        load_ground_truth(&data.ground_truth_dir(video), &pattern(&data.gt_pattern)?, video).map_err(media)?;
    Ok(VideoData {
        video_id: video.to_owned(),
        frames,
        instances,
        ground_truth,
    })
}

pub fn load_ground_truth_only(data: &DataConfig) -> Result<Vec<GroundTruthMask>> {
    let mut all = Vec::new();
    for v in &data.videos {
        let gt = load_ground_truth(&data.ground_truth_dir(v), &pattern(&data.gt_pattern)?, v).map_err(|source| {
            PipelineError::Media {
                video: v.clone(),
                source,
            }
        })?;
        all.extend(gt);
    }
    Ok(all)
}

/// Per-node features of a whole dataset. Node ids are global, assigned in
/// video order and then instance order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStage {
    pub instances: Vec<Instance>,
    pub catalog: NodeCatalog,
    pub matrix: FeatureMatrix,
    pub frame_sizes: BTreeMap<String, (usize, usize)>,
}

/// Background model and features for every video. Values are rounded to
/// single precision, the precision of the feature file, so a cached run
/// sees exactly what a fresh run sees.
pub fn extract_features(
    videos: &[VideoData],
    background: &BackgroundConfig,
    features: &FeatureConfig,
) -> Result<FeatureStage> {
    features.layout.validate()?;
    let mut instances = Vec::new();
    let mut rows: Vec<NodeFeatures> = Vec::new();
    let mut frame_sizes = BTreeMap::new();
    for v in videos {
        let Some(first) = v.frames.first() else {
            return Err(PipelineError::Media {
                video: v.video_id.clone(),
                source: MediaError::NoFrames(PathBuf::from(&v.video_id)),
            });
        };
        frame_sizes.insert(v.video_id.clone(), first.dims());
        if v.instances.is_empty() {
            warn!("video {} has no instances", v.video_id);
            continue;
        }
        let stride = background
            .stride
            .unwrap_or_else(|| default_stride(v.frames.len(), background.max_samples));
        let bg = median_background(&v.video_id, &v.frames, background.max_samples, stride).map_err(|source| {
            PipelineError::Background {
                video: v.video_id.clone(),
                source,
            }
        })?;
        let offset = instances.len();
        let mut local: Vec<Instance> = v.instances.clone();
        for (i, inst) in local.iter_mut().enumerate() {
            inst.node_id = i;
        }
        let mut video_rows = video_features(&v.frames, &bg, &local, &features.layout, features.window)?;
        let flagged = video_rows.iter().filter(|r| r.flags.tiny_roi).count();
        if flagged > 0 {
            info!("video {}: {flagged} instances with too small a RoI for texture", v.video_id);
        }
        for (i, inst) in local.iter_mut().enumerate() {
            inst.node_id = offset + i;
        }
        for r in &mut video_rows {
            r.node_id += offset;
        }
        instances.extend(local);
        rows.extend(video_rows);
    }
    let matrix = FeatureMatrix::from_rows(features.layout, &rows)?.quantized();
    let catalog = NodeCatalog::from_instances(&instances)?;
    Ok(FeatureStage {
        instances,
        catalog,
        matrix,
        frame_sizes,
    })
}

impl FeatureStage {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        self.matrix.save(&dir.join("features.bin"))?;
        write(&dir.join("instances.txt"), format_instances(&self.instances, &self.frame_sizes)?)?;
        write(&dir.join("catalog.csv"), self.catalog.to_csv())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let matrix = FeatureMatrix::load(&dir.join("features.bin"))?;
        let text_path = dir.join("instances.txt");
        let text = read_string(&text_path)?;
        let instances = media_io::parse_instances(&text, &text_path)?;
        let mut frame_sizes = BTreeMap::new();
        for line in text.lines().filter_map(|l| l.strip_prefix("#size,")) {
            let parts: Vec<&str> = line.rsplitn(3, ',').collect();
            if let [h, w, video] = parts[..] {
                if let (Ok(w), Ok(h)) = (w.parse(), h.parse()) {
                    frame_sizes.insert(video.to_owned(), (w, h));
                }
            }
        }
        if matrix.nodes() != instances.len() {
            return Err(PipelineError::Config(format!(
                "cached features have {} rows but {} instances",
                matrix.nodes(),
                instances.len()
            )));
        }
        let catalog = NodeCatalog::from_instances(&instances)?;
        Ok(Self {
            instances,
            catalog,
            matrix,
            frame_sizes,
        })
    }
}

/// Loads cached features for this config or computes and caches them.
pub fn features_stage(cfg: &RunConfig) -> Result<FeatureStage> {
    let dir = cfg.features_dir();
    if dir.join("features.bin").exists() && dir.join("instances.txt").exists() {
        info!("reusing features from {}", dir.display());
        return FeatureStage::load(&dir);
    }
    let mut videos = Vec::with_capacity(cfg.data.videos.len());
    for v in &cfg.data.videos {
        info!("loading {v}");
        videos.push(load_video(&cfg.data, v)?);
    }
    let stage = extract_features(&videos, &cfg.background, &cfg.features)?;
    stage.save(&dir)?;
    info!("features: {} nodes x {} dims", stage.matrix.nodes(), stage.matrix.dimension());
    Ok(stage)
}

/// Loads the cached normalized adjacency or builds and caches the graph.
pub fn graph_stage(cfg: &RunConfig, features: &FeatureStage) -> Result<NormalizedAdjacency> {
    let dir = cfg.graph_dir();
    if dir.join("graph.csr").exists() {
        info!("reusing graph from {}", dir.display());
        return Ok(normalize_adjacency(&load_adjacency(&dir)?));
    }
    let graph = build_graph(features.matrix.data.view(), cfg.k)?;
    save_graph(&graph, &dir, cfg.k)?;
    info!("graph: {} nodes, {} edges, rho {}", graph.n, graph.edge_count(), graph.rho);
    Ok(normalize(&graph))
}

/// Everything training and evaluation read.
pub struct Prepared {
    pub features: FeatureStage,
    pub adjacency: NormalizedAdjacency,
    pub ground_truth: Vec<GroundTruthMask>,
    pub labels: LabelMatrix,
}

impl Prepared {
    pub fn new(features: FeatureStage, adjacency: NormalizedAdjacency, ground_truth: Vec<GroundTruthMask>) -> Result<Self> {
        let labels = label_nodes(&features.instances, &ground_truth)?;
        Ok(Self {
            features,
            adjacency,
            ground_truth,
            labels,
        })
    }

    pub fn experiment<'a>(&'a self, unseen: &'a [String], partition_id: usize, density: f64, train: &TrainConfig) -> Experiment<'a> {
        Experiment {
            features: self.features.matrix.data.view(),
            adjacency: &self.adjacency,
            labels: &self.labels,
            catalog: &self.features.catalog,
            instances: &self.features.instances,
            ground_truth: &self.ground_truth,
            unseen_videos: unseen,
            partition_id,
            density,
            train: train.clone(),
        }
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let features = features_stage(cfg)?;
    let adjacency = graph_stage(cfg, &features)?;
    let ground_truth = load_ground_truth_only(&cfg.data)?;
    Prepared::new(features, adjacency, ground_truth)
}

/// One (partition, density, repetition) run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub partition: usize,
    pub density: f64,
    pub repetition: usize,
    pub split_seed: u64,
    pub train_seed: u64,
}

/// Every run requested by the config, in deterministic order.
pub fn plan(cfg: &RunConfig, partition: Option<usize>) -> Result<Vec<Cell>> {
    let count = cfg.partitions().len();
    let selected: Vec<usize> = match partition {
        Some(p) if p >= count => {
            return Err(PipelineError::Config(format!("partition {p} does not exist ({count} defined)")))
        }
        Some(p) => vec![p],
        None => (0..count).collect(),
    };
    let mut cells = Vec::new();
    for p in selected {
        for &density in &cfg.densities {
            for repetition in 0..cfg.repetitions {
                let (split_seed, train_seed) = repetition_seeds(cfg.base_seed, p, density, repetition);
                cells.push(Cell {
                    partition: p,
                    density,
                    repetition,
                    split_seed,
                    train_seed,
                });
            }
        }
    }
    Ok(cells)
}

fn rep_dir(cfg: &RunConfig, cell: &Cell) -> PathBuf {
    cfg.cell_dir(cell.partition, cell.density).join(format!("rep{}", cell.repetition))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub partition: usize,
    pub density: f64,
    pub repetition: Option<usize>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub features_hash: String,
    pub graph_hash: String,
    pub base_seed: u64,
    pub cells: Vec<Cell>,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, command: &str, cells: &[Cell]) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_owned(),
            command: command.to_owned(),
            config_hash: cfg.config_hash(),
            features_hash: cfg.features_hash(),
            graph_hash: cfg.graph_hash(),
            base_seed: cfg.base_seed,
            cells: cells.to_vec(),
        }
    }

    pub fn write(&self, cfg: &RunConfig) -> Result<()> {
        write(
            &cfg.output_dir.join(format!("manifest-{}.json", self.command)),
            serde_json::to_string_pretty(self)?,
        )
    }
}

fn write_failures(cfg: &RunConfig, command: &str, failures: &[Failure]) -> Result<()> {
    let path = cfg.output_dir.join(format!("failures-{command}.json"));
    if failures.is_empty() {
        if path.exists() {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        return Ok(());
    }
    write(&path, serde_json::to_string_pretty(failures)?)
}

/// Outcome of a batch of cells. `failures` is empty iff every run finished.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub completed: usize,
    pub failures: Vec<Failure>,
}

/// Trains every cell and writes `model.bin`, `history.csv` and
/// `split.json` per repetition.
pub fn train_cells(cfg: &RunConfig, prepared: &Prepared, cells: &[Cell]) -> Result<BatchOutcome> {
    let partitions = cfg.partitions();
    let mut out = BatchOutcome::default();
    for cell in cells {
        let unseen = &partitions[cell.partition].unseen;
        let exp = prepared.experiment(unseen, cell.partition, cell.density, &cfg.train);
        match protocol::train_split(&exp, cell.split_seed, cell.train_seed) {
            Ok((split, model, history)) => {
                let dir = rep_dir(cfg, cell);
                fs::create_dir_all(&dir).map_err(io_err(&dir))?;
                model.save(&dir.join("model.bin"))?;
                write(&dir.join("history.csv"), history.to_csv())?;
                write(&dir.join("split.json"), split.to_json()?)?;
                info!(
                    "p{} d{} rep{}: {} epochs, best {}",
                    cell.partition,
                    cell.density,
                    cell.repetition,
                    history.epochs.len(),
                    history.best_epoch
                );
                out.completed += 1;
            }
            Err(e) => {
                warn!("p{} d{} rep{} failed: {e}", cell.partition, cell.density, cell.repetition);
                out.failures.push(Failure {
                    partition: cell.partition,
                    density: cell.density,
                    repetition: Some(cell.repetition),
                    error: e.to_string(),
                });
            }
        }
    }
    Manifest::new(cfg, "train", cells).write(cfg)?;
    write_failures(cfg, "train", &out.failures)?;
    Ok(out)
}

fn group_cells(cells: &[Cell]) -> BTreeMap<(usize, u64), Vec<Cell>> {
    let mut groups: BTreeMap<(usize, u64), Vec<Cell>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.partition, c.density.to_bits())).or_default().push(*c);
    }
    groups
}

/// Scores the saved model of every cell. Per repetition writes
/// `report.csv`; per (partition, density) writes `summary.json` and
/// `monte_carlo.json`.
pub fn evaluate_cells(cfg: &RunConfig, prepared: &Prepared, cells: &[Cell]) -> Result<BatchOutcome> {
    let partitions = cfg.partitions();
    let mut out = BatchOutcome::default();
    for ((partition, bits), group) in group_cells(cells) {
        let density = f64::from_bits(bits);
        let unseen = &partitions[partition].unseen;
        let exp = prepared.experiment(unseen, partition, density, &cfg.train);
        let mut reports = Vec::new();
        for cell in &group {
            let dir = rep_dir(cfg, cell);
            let scored = (|| -> Result<EvalReport> {
                let model = GcnModel::load(&dir.join("model.bin"))?;
                let split = SplitSpec::from_json(&read_string(&dir.join("split.json"))?)?;
                let report = protocol::score_unseen(&exp, &split, &model)?;
                write(&dir.join("report.csv"), report.to_csv())?;
                Ok(report)
            })();
            match scored {
                Ok(r) => {
                    out.completed += 1;
                    reports.push(r);
                }
                Err(e) => out.failures.push(Failure {
                    partition,
                    density,
                    repetition: Some(cell.repetition),
                    error: e.to_string(),
                }),
            }
        }
        if reports.len() == group.len() {
            let summary = MonteCarloSummary::from_reports(&reports)?;
            let dir = cfg.cell_dir(partition, density);
            write(&dir.join("summary.json"), summary.to_summary_json()?)?;
            write(&dir.join("monte_carlo.json"), serde_json::to_string_pretty(&summary)?)?;
        }
    }
    Manifest::new(cfg, "evaluate", cells).write(cfg)?;
    write_failures(cfg, "evaluate", &out.failures)?;
    Ok(out)
}

/// Mean and best F per (partition, density) read back from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub partition: usize,
    pub density: f64,
    pub unseen: Vec<String>,
    pub summary: MonteCarloSummary,
}

pub fn collect_reports(cfg: &RunConfig) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for (p, part) in cfg.partitions().iter().enumerate() {
        for &d in &cfg.densities {
            let path = cfg.cell_dir(p, d).join("monte_carlo.json");
            if path.exists() {
                rows.push(ReportRow {
                    partition: p,
                    density: d,
                    unseen: part.unseen.clone(),
                    summary: serde_json::from_str(&read_string(&path)?)?,
                });
            }
        }
    }
    Ok(rows)
}

/// Plain-text table of challenge columns, one line per (partition, density).
pub fn render_report(rows: &[ReportRow]) -> String {
    let mut s = String::from("partition,density,statistic");
    for c in protocol::CHALLENGES {
        let _ = write!(s, ",{c}");
    }
    s.push_str(",overall\n");
    for r in rows {
        for (stat, map, overall) in [
            ("mean", &r.summary.challenge_mean, r.summary.overall_mean),
            ("best", &r.summary.challenge_best, r.summary.overall_best),
        ] {
            let _ = write!(s, "{},{},{stat}", r.partition, r.density);
            for c in protocol::CHALLENGES {
                match map.get(c) {
                    Some(f) => {
                        let _ = write!(s, ",{f:.4}");
                    }
                    None => s.push(','),
                }
            }
            let _ = writeln!(s, ",{overall:.4}");
        }
    }
    s
}

/// Writes a synthetic dataset as `frames/<video>/in*.png`,
/// `instances/<video>.txt`, `gt/<video>/gt*.png` and a matching `run.toml`.
pub fn write_synthetic_dataset(specs: &[SyntheticSpec], dir: &Path) -> Result<RunConfig> {
    let frame_pat = pattern(&default_frame_pattern())?;
    let gt_pat = pattern(&default_gt_pattern())?;
    let inst_dir = dir.join("instances");
    fs::create_dir_all(&inst_dir).map_err(io_err(&inst_dir))?;
    let mut videos = Vec::new();
    for spec in specs {
        let video = media_io::synth_sequence(spec)?;
        let frames_dir = dir.join("frames").join(&video.video_id);
        let gt_dir = dir.join("gt").join(&video.video_id);
        fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
        fs::create_dir_all(&gt_dir).map_err(io_err(&gt_dir))?;
        for f in &video.frames {
            media_io::save_frame(&frames_dir.join(frame_pat.file_name(f.frame_index)), f)?;
        }
        for g in &video.ground_truth {
            media_io::save_ground_truth(&gt_dir.join(gt_pat.file_name(g.frame_index)), g)?;
        }
        let sizes = BTreeMap::from([(video.video_id.clone(), (spec.width, spec.height))]);
        media_io::save_instances(&inst_dir.join(format!("{}.txt", video.video_id)), &video.instances, &sizes)?;
        videos.push(video.video_id);
    }
    let cfg = RunConfig {
        output_dir: PathBuf::from("out"),
        base_seed: 0,
        k: DEFAULT_K,
        densities: vec![0.1],
        repetitions: DEFAULT_REPETITIONS,
        data: DataConfig {
            videos,
            frames: "frames/{video}".into(),
            frame_pattern: default_frame_pattern(),
            instances: "instances/{video}.txt".into(),
            instance_pattern: default_label_pattern(),
            ground_truth: "gt/{video}".into(),
            gt_pattern: default_gt_pattern(),
        },
        partitions: Vec::new(),
        background: BackgroundConfig::default(),
        features: FeatureConfig::default(),
        train: TrainConfig::default(),
    };
    write(&dir.join("run.toml"), cfg.to_toml())?;
    RunConfig::load(&dir.join("run.toml"))
}

/// Synthetic dataset description for the `synth` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub videos: Vec<SyntheticSpec>,
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(&read_string(path)?)?;
        for v in &cfg.videos {
            v.validate()?;
        }
        Ok(cfg)
    }
}

/// Four 64x48 videos of 30 frames: two moving textured squares and two
/// static textured distractors each, over a noisy static backdrop.
pub fn default_synthetic_suite(seed: u64) -> SynthConfig {
    use crate::media_io::{MovingObject, StaticObject};
    let videos = (0..4)
        .map(|i| {
            let i64_ = i as i64;
            SyntheticSpec {
                video_id: format!("synthetic{i}"),
                frame_count: 30,
                width: 64,
                height: 48,
                moving: vec![
                    MovingObject {
                        start: (4 + i64_, 2),
                        velocity: (0, 1),
                        size: (10, 10),
                        intensity: 0.8,
                        texture: 0.15,
                    },
                    MovingObject {
                        start: (36, 50 - 2 * i64_),
                        velocity: (-1, -1),
                        size: (8, 8),
                        intensity: 0.15,
                        texture: 0.15,
                    },
                ],
                distractors: vec![
                    StaticObject {
                        position: (20, 40 + i),
                        size: (9, 9),
                        intensity: 0.7,
                        texture: 0.15,
                    },
                    StaticObject {
                        position: (30, 8),
                        size: (8, 12),
                        intensity: 0.25,
                        texture: 0.15,
                    },
                ],
                background: (0.45, 0.1),
                noise: 0.02,
                seed: crate::seed::derive_seed(seed, "synthetic", &[i as u64]),
            }
        })
        .collect();
    SynthConfig { videos }
}
