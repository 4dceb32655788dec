//! Two-layer graph convolutional network for transductive node
//! classification.
//!
//! ```text
//! Z = softmax( Â · relu( Â · X · W0 ) · W1 )
//! L = -Σ_{i∈S} Σ_j Y(i,j) ln Z(i,j) + (λ/2)(‖W0‖² + ‖W1‖²)
//! ```
//!
//! Gradients are derived by hand (see [`backward`]) and optimized with Adam
//! on the full training set each epoch. `Â` is symmetric, so `Âᵀ = Â`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::NormalizedAdjacency;
use crate::protocol::LabelMatrix;

/// Background and foreground.
pub const CLASSES: usize = 2;
/// Lower clamp applied to probabilities inside the log.
pub const LOG_FLOOR: f64 = 1e-12;
const MODEL_MAGIC: u32 = u32::from_le_bytes(*b"GMNN");

#[derive(Debug, Error)]
pub enum GcnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("node set {0} is empty")]
    EmptySet(&'static str),
    #[error("training and validation sets share node {0}")]
    Overlap(usize),
    #[error("node {0} is out of range")]
    NodeOutOfRange(usize),
    #[error("node {0} has no label")]
    Unlabeled(usize),
    #[error("forward cache is stale (model changed since the forward pass)")]
    StaleCache,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GcnError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Class {
    Background = 0,
    Foreground = 1,
}

impl Class {
    /// Argmax over `[p_bg, p_fg]`; ties go to background.
    pub fn from_probabilities(bg: f64, fg: f64) -> Self {
        if fg > bg {
            Class::Foreground
        } else {
            Class::Background
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    /// `C x H`.
    pub w0: Array2<f64>,
    /// `H x F`.
    pub w1: Array2<f64>,
    pub seed: u64,
    generation: u64,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

impl GcnModel {
    /// Glorot-uniform weights drawn from a generator seeded with `seed`.
    pub fn glorot(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::glorot_with(input, hidden, classes, seed, &mut rng)
    }

    fn glorot_with(input: usize, hidden: usize, classes: usize, seed: u64, rng: &mut impl Rng) -> Self {
        let w0 = glorot(rng, input, hidden);
        let w1 = glorot(rng, hidden, classes);
        Self { w0, w1, seed, generation: 0 }
    }

    pub fn from_weights(w0: Array2<f64>, w1: Array2<f64>) -> Result<Self> {
        if w0.ncols() != w1.nrows() {
            return Err(GcnError::Shape(format!(
                "W0 is {:?} but W1 is {:?}",
                w0.dim(),
                w1.dim()
            )));
        }
        if w0.iter().chain(w1.iter()).any(|v| !v.is_finite()) {
            return Err(GcnError::Shape("weights must be finite".into()));
        }
        Ok(Self { w0, w1, seed: 0, generation: 0 })
    }

    pub fn input_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w0.ncols()
    }

    pub fn classes(&self) -> usize {
        self.w1.ncols()
    }

    fn touch(&mut self) {
        self.generation += 1;
    }

    /// Mutable access to the weights; invalidates outstanding caches.
    pub fn weights_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        self.touch();
        (&mut self.w0, &mut self.w1)
    }

    /// Magic, C, H, F as little-endian u32, then W0 and W1 row-major as
    /// little-endian f64.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * (self.w0.len() + self.w1.len()));
        for h in [MODEL_MAGIC, self.input_dim() as u32, self.hidden() as u32, self.classes() as u32] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in self.w0.iter().chain(self.w1.iter()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let word = |i: usize| -> Result<usize> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
                .ok_or_else(|| GcnError::Format("truncated header".into()))
        };
        if word(0)? as u32 != MODEL_MAGIC {
            return Err(GcnError::Format("bad magic".into()));
        }
        let (c, h, f) = (word(1)?, word(2)?, word(3)?);
        if bytes.len() != 16 + 8 * (c * h + h * f) {
            return Err(GcnError::Format("length disagrees with header".into()));
        }
        let vals: Vec<f64> = bytes[16..]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let w0 = Array2::from_shape_vec((c, h), vals[..c * h].to_vec()).expect("shape checked");
        let w1 = Array2::from_shape_vec((h, f), vals[c * h..].to_vec()).expect("shape checked");
        Self::from_weights(w0, w1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    pub early_stop_window: usize,
    pub hidden: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            dropout: 0.5,
            max_epochs: 600,
            early_stop_window: 10,
            hidden: 16,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GcnError::Config(m.to_owned()));
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.early_stop_window == 0 || self.max_epochs == 0 || self.hidden == 0 {
            return bad("early_stop_window, max_epochs and hidden must be at least 1");
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.learning_rate) || !positive(self.epsilon) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("learning_rate and epsilon must be positive, weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Inverted dropout applied to the inputs of both layers during training.
pub struct Dropout<'a, R: Rng> {
    pub rate: f64,
    pub rng: &'a mut R,
}

fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), rate: f64) -> Array2<f64> {
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < keep { scale } else { 0.0 })
}

/// Intermediates of one forward pass, kept for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Layer-1 input after dropout.
    x_in: Array2<f64>,
    /// `Â · x_in · W0`.
    pre_hidden: Array2<f64>,
    /// Scaled dropout mask on the hidden activations, if dropout was on.
    hidden_mask: Option<Array2<f64>>,
    /// `Â · dropout(relu(pre_hidden))`.
    propagated_hidden: Array2<f64>,
    pub probabilities: Array2<f64>,
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_shapes(x: ArrayView2<f64>, ahat: &NormalizedAdjacency, model: &GcnModel) -> Result<()> {
    if x.nrows() != ahat.n() {
        return Err(GcnError::Shape(format!("X has {} rows, Â is {}x{}", x.nrows(), ahat.n(), ahat.n())));
    }
    if x.ncols() != model.input_dim() {
        return Err(GcnError::Shape(format!("X has {} columns, W0 expects {}", x.ncols(), model.input_dim())));
    }
    if model.w0.ncols() != model.w1.nrows() {
        return Err(GcnError::Shape("W0 and W1 disagree on the hidden width".into()));
    }
    Ok(())
}

/// Forward pass. With `dropout`, fresh masks are drawn for the input and
/// hidden activations.
pub fn forward<R: Rng>(
    x: ArrayView2<f64>,
    ahat: &NormalizedAdjacency,
    model: &GcnModel,
    dropout: Option<Dropout<'_, R>>,
) -> Result<ForwardCache> {
    check_shapes(x, ahat, model)?;
    let (x_in, mut dropout) = match dropout {
        Some(d) if d.rate > 0.0 => {
            let mask = dropout_mask(d.rng, x.dim(), d.rate);
            (&x * &mask, Some(d))
        }
        _ => (x.to_owned(), None),
    };
    let pre_hidden = ahat.matmul(x_in.dot(&model.w0).view());
    let mut hidden = pre_hidden.mapv(|v| v.max(0.0));
    let hidden_mask = dropout.as_mut().map(|d| dropout_mask(d.rng, hidden.dim(), d.rate));
    if let Some(mask) = &hidden_mask {
        hidden *= mask;
    }
    let propagated_hidden = ahat.matmul(hidden.view());
    let mut probabilities = propagated_hidden.dot(&model.w1);
    softmax_rows(&mut probabilities);
    Ok(ForwardCache {
        generation: model.generation,
        x_in,
        pre_hidden,
        hidden_mask,
        propagated_hidden,
        probabilities,
    })
}

/// Inference forward pass without dropout.
pub fn infer(x: ArrayView2<f64>, ahat: &NormalizedAdjacency, model: &GcnModel) -> Result<Array2<f64>> {
    Ok(forward::<ChaCha8Rng>(x, ahat, model, None)?.probabilities)
}

fn check_nodes(set: &[usize], n: usize, labels: &LabelMatrix, name: &'static str) -> Result<()> {
    if set.is_empty() {
        return Err(GcnError::EmptySet(name));
    }
    for &i in set {
        if i >= n {
            return Err(GcnError::NodeOutOfRange(i));
        }
        if !labels.covered[i] {
            return Err(GcnError::Unlabeled(i));
        }
    }
    Ok(())
}

/// Cross-entropy over `nodes` plus `(λ/2)(‖W0‖² + ‖W1‖²)`.
pub fn loss(
    probabilities: ArrayView2<f64>,
    labels: &LabelMatrix,
    nodes: &[usize],
    model: &GcnModel,
    weight_decay: f64,
) -> Result<f64> {
    check_nodes(nodes, probabilities.nrows(), labels, "S")?;
    let mut ce = 0.0;
    for &i in nodes {
        for j in 0..probabilities.ncols() {
            let y = labels.y[[i, j]];
            if y != 0.0 {
                ce -= y * probabilities[[i, j]].max(LOG_FLOOR).ln();
            }
        }
    }
    let decay = 0.5 * weight_decay * (model.w0.iter().map(|v| v * v).sum::<f64>() + model.w1.iter().map(|v| v * v).sum::<f64>());
    Ok(ce + decay)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
}

/// Exact gradients of [`loss`] for the pass recorded in `cache`.
///
/// With `G = (Z - Y)` on rows in `nodes` and zero elsewhere, `M_h` the
/// hidden dropout mask and `P = Â X W0`:
///
/// ```text
/// dW1 = (Â H)ᵀ G + λ W1
/// dH  = Â G W1ᵀ ⊙ M_h ⊙ [P > 0]
/// dW0 = Xᵀ (Â dH) + λ W0
/// ```
pub fn backward(
    cache: &ForwardCache,
    ahat: &NormalizedAdjacency,
    model: &GcnModel,
    labels: &LabelMatrix,
    nodes: &[usize],
    weight_decay: f64,
) -> Result<Gradients> {
    if cache.generation != model.generation {
        return Err(GcnError::StaleCache);
    }
    let n = cache.probabilities.nrows();
    check_nodes(nodes, n, labels, "S")?;
    let mut g_logits = Array2::<f64>::zeros(cache.probabilities.dim());
    for &i in nodes {
        for j in 0..cache.probabilities.ncols() {
            g_logits[[i, j]] = cache.probabilities[[i, j]] - labels.y[[i, j]];
        }
    }
    let mut d_w1 = cache.propagated_hidden.t().dot(&g_logits);
    d_w1.scaled_add(weight_decay, &model.w1);

    let mut g_hidden = ahat.matmul(g_logits.dot(&model.w1.t()).view());
    if let Some(mask) = &cache.hidden_mask {
        g_hidden *= mask;
    }
    Zip::from(&mut g_hidden)
        .and(&cache.pre_hidden)
        .for_each(|g, &p| {
            if p <= 0.0 {
                *g = 0.0;
            }
        });
    let mut d_w0 = cache.x_in.t().dot(&ahat.matmul(g_hidden.view()));
    d_w0.scaled_add(weight_decay, &model.w0);
    Ok(Gradients { w0: d_w0, w1: d_w1 })
}

/// First and second moment estimates for both weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: [Array2<f64>; 2],
    pub v: [Array2<f64>; 2],
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &GcnModel) -> Self {
        let z0 = Array2::zeros(model.w0.dim());
        let z1 = Array2::zeros(model.w1.dim());
        Self {
            m: [z0.clone(), z1.clone()],
            v: [z0, z1],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut GcnModel, grads: &Gradients, state: &mut AdamState, config: &TrainConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let (b1, b2, lr, eps) = (config.beta1, config.beta2, config.learning_rate, config.epsilon);
    let (w0, w1) = model.weights_mut();
    for (k, (w, g)) in [(w0, &grads.w0), (w1, &grads.w1)].into_iter().enumerate() {
        Zip::from(w)
            .and(g)
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    /// `epoch,train_loss,val_loss,val_acc`, full round-trip precision.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.val_loss, e.val_acc);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EarlyStopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops after `window` consecutive epochs without a strict decrease of the
/// validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    window: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) -> EarlyStopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            EarlyStopDecision::Improved
        } else {
            self.stale += 1;
            if self.stale >= self.window {
                EarlyStopDecision::Stop
            } else {
                EarlyStopDecision::Continue
            }
        }
    }
}

fn accuracy(probabilities: ArrayView2<f64>, labels: &LabelMatrix, nodes: &[usize]) -> f64 {
    let correct = nodes
        .iter()
        .filter(|&&i| {
            let pred = Class::from_probabilities(probabilities[[i, 0]], probabilities[[i, 1]]);
            labels.y[[i, pred.index()]] == 1.0
        })
        .count();
    correct as f64 / nodes.len() as f64
}

/// Full-batch training with early stopping on the validation loss (plain
/// cross-entropy over `validation`). Returns the weights of the epoch with
/// the lowest validation loss.
pub fn train(
    x: ArrayView2<f64>,
    ahat: &NormalizedAdjacency,
    labels: &LabelMatrix,
    train_nodes: &[usize],
    validation: &[usize],
    config: &TrainConfig,
) -> Result<(GcnModel, TrainHistory)> {
    config.validate()?;
    let n = x.nrows();
    if labels.y.dim() != (n, CLASSES) {
        return Err(GcnError::Shape(format!("Y is {:?}, expected ({n}, {CLASSES})", labels.y.dim())));
    }
    check_nodes(train_nodes, n, labels, "S")?;
    check_nodes(validation, n, labels, "T")?;
    let mut in_train = vec![false; n];
    for &i in train_nodes {
        in_train[i] = true;
    }
    if let Some(&i) = validation.iter().find(|&&i| in_train[i]) {
        return Err(GcnError::Overlap(i));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = GcnModel::glorot_with(x.ncols(), config.hidden, CLASSES, config.seed, &mut rng);
    check_shapes(x, ahat, &model)?;
    let mut state = AdamState::new(&model);
    let mut stopper = EarlyStopping::new(config.early_stop_window);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let drop = Dropout {
            rate: config.dropout,
            rng: &mut rng,
        };
        let cache = forward(x, ahat, &model, Some(drop))?;
        let train_loss = loss(cache.probabilities.view(), labels, train_nodes, &model, config.weight_decay)?;
        let grads = backward(&cache, ahat, &model, labels, train_nodes, config.weight_decay)?;
        adam_step(&mut model, &grads, &mut state, config);

        let z = infer(x, ahat, &model)?;
        let val_loss = loss(z.view(), labels, validation, &model, 0.0)?;
        let val_acc = accuracy(z.view(), labels, validation);
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        match stopper.observe(val_loss) {
            EarlyStopDecision::Improved => {
                best = model.clone();
                best_epoch = epoch;
            }
            EarlyStopDecision::Continue => {}
            EarlyStopDecision::Stop => {
                stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub classes: Vec<Class>,
    pub probabilities: Array2<f64>,
}

pub fn predict(model: &GcnModel, x: ArrayView2<f64>, ahat: &NormalizedAdjacency) -> Result<Prediction> {
    let probabilities = infer(x, ahat, model)?;
    let classes = probabilities
        .outer_iter()
        .map(|r| Class::from_probabilities(r[0], r[1]))
        .collect();
    Ok(Prediction {
        classes,
        probabilities,
    })
}
