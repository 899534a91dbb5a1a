//! Baseline models for the five tasks, built on the `obsr-nn` kernel.
//!
//! Region tasks (price regression, crime intensity) use a feed-forward MLP
//! over cell embeddings. Travel time uses a stacked LSTM over the embeddings
//! of a trajectory's cells; next-region prediction adds causal self-attention
//! and a six-way direction classifier, trained with teacher forcing.

use std::collections::BTreeSet;

use obsr_nn::layers::{dropout, dropout_backward, relu, relu_backward, sigmoid, sigmoid_backward};
use obsr_nn::{loss, Checkpoint, Dense, LossKind, Lstm, MultiHeadAttention, NnError, ParamStore, Tensor2, TrainConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingMatrix;
use crate::hexgrid::{CellId, DirectionLabel, GridError};
use crate::metrics::{self, evaluate_at_k, haversine, regression_metrics, MetricError, MetricReport, DEFAULT_KS};
use crate::regionize::{RegionDataset, TargetKind};
use crate::splitter::{SegmentedTrajectory, SplitError, SplitManifest};
use crate::trajprep::{encode_directions, PrepError};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("no training examples")]
    EmptyTrainSet,
    #[error("no test examples")]
    EmptyTestSet,
    #[error("embedding dimension {found} differs from model input {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("target {value} of cell {cell} outside [0, 1]")]
    TargetOutOfRange { cell: CellId, value: f64 },
    #[error("expected {expected:?} targets, got {found:?}")]
    WrongTargetKind { expected: TargetKind, found: TargetKind },
    #[error("split cell {0} has no target")]
    MissingTarget(CellId),
    #[error("trajectory {0:?} has a non-positive duration")]
    NonPositiveDuration(String),
    #[error("trajectory {0:?} has an empty input sequence")]
    EmptySequence(String),
    #[error("instance built for {found:?}, model needs {expected:?}")]
    WrongTask { expected: SeqTask, found: SeqTask },
    #[error("unsupported loss {0:?} for this model")]
    UnsupportedLoss(LossKind),
    #[error("checkpoint metadata: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Split(#[from] SplitError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Prep(#[from] PrepError),
}

pub type Result<T> = std::result::Result<T, BaselineError>;

/// RNG for one purpose of one run. Streams are keyed by a tag so adding a new
/// consumer never shifts the draws of an existing one.
fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
    }
    rng.set_stream(h);
    rng
}

/// Per-feature mean and standard deviation. Constant features get std 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for r in rows {
            n += 1;
            for (j, &v) in r.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        let nf = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / nf - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

fn split_cells(manifest: &SplitManifest) -> Result<(Vec<CellId>, Vec<CellId>)> {
    Ok((manifest.train_cells()?, manifest.test_cells()?))
}

/// Embeddings, targets and split for one region task.
#[derive(Clone, Debug)]
pub struct RegionTaskInstance {
    pub embeddings: EmbeddingMatrix,
    pub targets: RegionDataset,
    pub manifest: SplitManifest,
    /// Fitted on training cells only.
    pub standardizer: Standardizer,
    /// Split cells without an embedding; they use the zero vector.
    pub missing_embeddings: usize,
    /// Every cell whose data entered a fitted statistic. Leakage tests assert
    /// that this never intersects the test side.
    pub fit_cells: BTreeSet<CellId>,
    train: Vec<CellId>,
    test: Vec<CellId>,
}

impl RegionTaskInstance {
    pub fn new(embeddings: EmbeddingMatrix, targets: RegionDataset, manifest: SplitManifest) -> Result<Self> {
        let (train, test) = split_cells(&manifest)?;
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        for &c in train.iter().chain(&test) {
            if targets.target(c).is_none() {
                return Err(BaselineError::MissingTarget(c));
            }
        }
        let dim = embeddings.dim;
        if let Some(v) = embeddings.vectors.values().find(|v| v.len() != dim) {
            return Err(BaselineError::DimensionMismatch {
                expected: dim,
                found: v.len(),
            });
        }
        let missing = train
            .iter()
            .chain(&test)
            .filter(|c| embeddings.get(c).is_none())
            .count();
        if missing > 0 {
            log::warn!("{missing} split cells have no embedding; using zero vectors");
        }
        let zero = vec![0.0; dim];
        let rows: Vec<&[f64]> = train
            .iter()
            .map(|c| embeddings.get(c).unwrap_or(&zero))
            .collect();
        let standardizer = Standardizer::fit(rows, dim);
        Ok(Self {
            embeddings,
            targets,
            manifest,
            standardizer,
            missing_embeddings: missing,
            fit_cells: train.iter().copied().collect(),
            train,
            test,
        })
    }

    pub fn train_cells(&self) -> &[CellId] {
        &self.train
    }

    pub fn test_cells(&self) -> &[CellId] {
        &self.test
    }

    /// Raw embedding of `c`, or zeros.
    pub fn raw_features(&self, c: CellId) -> Vec<f64> {
        self.embeddings
            .get(&c)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.embeddings.dim])
    }

    fn target(&self, c: CellId) -> f64 {
        self.targets.target(c).expect("targets checked at construction")
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Mlp {
    hidden: Vec<Dense>,
    head: Dense,
    dropout_after: Vec<usize>,
    dropout_p: f64,
    sigmoid_out: bool,
}

struct MlpCache {
    inputs: Vec<Tensor2>,
    pre: Vec<Tensor2>,
    masks: Vec<Option<Tensor2>>,
    out: Tensor2,
}

impl Mlp {
    fn new(store: &mut ParamStore, input: usize, cfg: &TrainConfig, sigmoid_out: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut width = input;
        let hidden = cfg
            .mlp_hidden
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let d = Dense::new(store, &format!("mlp.h{i}"), width, w, rng);
                width = w;
                d
            })
            .collect();
        let head = Dense::new(store, "mlp.out", width, 1, rng);
        // Zero output weights: the untrained model predicts the (standardized)
        // train mean exactly, or 0.5 behind a sigmoid.
        store.value_mut(head.w).fill(0.0);
        Self {
            hidden,
            head,
            dropout_after: cfg.dropout_after.clone(),
            dropout_p: cfg.dropout_p,
            sigmoid_out,
        }
    }

    fn bind(store: &ParamStore, cfg: &TrainConfig, sigmoid_out: bool) -> Result<Self> {
        Ok(Self {
            hidden: (0..cfg.mlp_hidden.len())
                .map(|i| Dense::bind(store, &format!("mlp.h{i}")))
                .collect::<obsr_nn::Result<_>>()?,
            head: Dense::bind(store, "mlp.out")?,
            dropout_after: cfg.dropout_after.clone(),
            dropout_p: cfg.dropout_p,
            sigmoid_out,
        })
    }

    fn input_dim(&self) -> usize {
        self.hidden.first().unwrap_or(&self.head).in_dim
    }

    fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor2, MlpCache)> {
        let mut cache = MlpCache {
            inputs: Vec::new(),
            pre: Vec::new(),
            masks: Vec::new(),
            out: Tensor2::zeros(0, 0),
        };
        let mut h = x.clone();
        for (i, layer) in self.hidden.iter().enumerate() {
            let z = layer.forward(store, &h)?;
            let a = relu(&z);
            let (a, mask) = if self.dropout_after.contains(&i) {
                dropout(&a, self.dropout_p, training, rng)?
            } else {
                (a, None)
            };
            cache.inputs.push(h);
            cache.pre.push(z);
            cache.masks.push(mask);
            h = a;
        }
        let z = self.head.forward(store, &h)?;
        cache.inputs.push(h);
        let out = if self.sigmoid_out { sigmoid(&z) } else { z };
        cache.out = out.clone();
        Ok((out, cache))
    }

    fn backward(&self, store: &mut ParamStore, cache: &MlpCache, dout: &Tensor2) -> Result<()> {
        let dz = if self.sigmoid_out {
            sigmoid_backward(&cache.out, dout)?
        } else {
            dout.clone()
        };
        let n = self.hidden.len();
        let mut dh = self.head.backward(store, &cache.inputs[n], &dz)?;
        for i in (0..n).rev() {
            dh = dropout_backward(cache.masks[i].as_ref(), &dh)?;
            let dz = relu_backward(&cache.pre[i], &dh)?;
            dh = self.hidden[i].backward(store, &cache.inputs[i], &dz)?;
        }
        Ok(())
    }
}

fn rows_tensor(rows: &[Vec<f64>], dim: usize) -> Result<Tensor2> {
    let data: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Tensor2::from_vec(rows.len(), dim, data)?)
}

fn pointwise_loss(kind: LossKind, pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    Ok(match kind {
        LossKind::SmoothL1 => loss::smooth_l1(pred, target)?,
        LossKind::L1 => loss::l1(pred, target)?,
        other => return Err(BaselineError::UnsupportedLoss(other)),
    })
}

fn minibatches(mut idx: Vec<usize>, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    idx.shuffle(rng);
    idx.chunks(batch).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RegionMeta {
    config: TrainConfig,
    x_scaler: Standardizer,
    y_scaler: Option<Standardizer>,
    sigmoid_out: bool,
}

/// Trained region MLP with its input (and, for price targets, output) scaling.
#[derive(Clone, Debug)]
pub struct RegionModel {
    pub store: ParamStore,
    mlp: Mlp,
    pub config: TrainConfig,
    pub x_scaler: Standardizer,
    pub y_scaler: Option<Standardizer>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl RegionModel {
    /// Predictions for raw (unstandardized) embedding rows, dropout off.
    pub fn predict(&self, raw: &[Vec<f64>]) -> Result<Vec<f64>> {
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        let dim = self.mlp.input_dim();
        let rows: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                if r.len() != dim {
                    return Err(BaselineError::DimensionMismatch {
                        expected: dim,
                        found: r.len(),
                    });
                }
                Ok(self.x_scaler.apply(r))
            })
            .collect::<Result<_>>()?;
        let x = rows_tensor(&rows, dim)?;
        let mut unused = rng_for(0, "eval");
        let (out, _) = self.mlp.forward(&self.store, &x, false, &mut unused)?;
        Ok(out
            .data()
            .iter()
            .map(|&z| match &self.y_scaler {
                Some(s) => z * s.std[0] + s.mean[0],
                None => z,
            })
            .collect())
    }

    pub fn predict_cells(&self, inst: &RegionTaskInstance, cells: &[CellId]) -> Result<Vec<f64>> {
        let raw: Vec<Vec<f64>> = cells.iter().map(|&c| inst.raw_features(c)).collect();
        self.predict(&raw)
    }

    /// Metrics on the instance's test cells.
    pub fn evaluate(&self, inst: &RegionTaskInstance) -> Result<MetricReport> {
        let cells = inst.test_cells();
        if cells.is_empty() {
            return Err(BaselineError::EmptyTestSet);
        }
        let y: Vec<f64> = cells.iter().map(|&c| inst.target(c)).collect();
        let yhat = self.predict_cells(inst, cells)?;
        let mut report = regression_metrics(&y, &yhat)?;
        if self.mlp.sigmoid_out {
            report.task = "intensity".into();
            report.entries.remove("mape");
            report.entries.remove("smape");
            report.counts.remove("mape_excluded");
            match metrics::r2(&y, &yhat) {
                Ok(v) => report.insert("r2", v),
                Err(MetricError::ZeroVariance) => {
                    log::warn!("test targets are constant; R2 undefined");
                }
                Err(e) => return Err(e.into()),
            }
        }
        if inst.missing_embeddings > 0 {
            report.counts.insert("zero_embeddings".into(), inst.missing_embeddings);
        }
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = RegionMeta {
            config: self.config.clone(),
            x_scaler: self.x_scaler.clone(),
            y_scaler: self.y_scaler.clone(),
            sigmoid_out: self.mlp.sigmoid_out,
        };
        Checkpoint::capture(&self.store, &self.config.hash(), serde_json::to_value(meta).expect("meta serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: RegionMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| BaselineError::Checkpoint(e.to_string()))?;
        let store = ck.restore()?;
        let mlp = Mlp::bind(&store, &meta.config, meta.sigmoid_out)?;
        Ok(Self {
            store,
            mlp,
            config: meta.config,
            x_scaler: meta.x_scaler,
            y_scaler: meta.y_scaler,
            epoch_losses: Vec::new(),
        })
    }
}

fn fit_region(inst: &RegionTaskInstance, cfg: &TrainConfig, sigmoid_out: bool) -> Result<RegionModel> {
    cfg.validate()?;
    let train = inst.train_cells();
    if train.is_empty() {
        return Err(BaselineError::EmptyTrainSet);
    }
    let dim = inst.embeddings.dim;
    let x: Vec<Vec<f64>> = train
        .iter()
        .map(|&c| inst.standardizer.apply(&inst.raw_features(c)))
        .collect();
    let y_raw: Vec<f64> = train.iter().map(|&c| inst.target(c)).collect();
    let y_scaler = if sigmoid_out {
        None
    } else {
        Some(Standardizer::fit(y_raw.iter().map(std::slice::from_ref), 1))
    };
    let y: Vec<f64> = match &y_scaler {
        Some(s) => y_raw.iter().map(|v| (v - s.mean[0]) / s.std[0]).collect(),
        None => y_raw,
    };

    let mut store = ParamStore::new();
    let mut init = rng_for(cfg.seed, "region.init");
    let mlp = Mlp::new(&mut store, dim, cfg, sigmoid_out, &mut init);
    let mut shuffle = rng_for(cfg.seed, "region.shuffle");
    let mut drop = rng_for(cfg.seed, "region.dropout");
    let adam = cfg.adam();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in minibatches((0..x.len()).collect(), cfg.batch_size, &mut shuffle) {
            let xb: Vec<Vec<f64>> = batch.iter().map(|&i| x[i].clone()).collect();
            let xb = rows_tensor(&xb, dim)?;
            let yb = Tensor2::from_vec(batch.len(), 1, batch.iter().map(|&i| y[i]).collect())?;
            let (pred, cache) = mlp.forward(&store, &xb, true, &mut drop)?;
            let (l, grad) = pointwise_loss(cfg.loss, &pred, &yb)?;
            store.zero_grads();
            mlp.backward(&mut store, &cache, &grad)?;
            store.adam_step(&adam)?;
            total += l * batch.len() as f64;
        }
        epoch_losses.push(total / x.len() as f64);
    }
    Ok(RegionModel {
        store,
        mlp,
        config: cfg.clone(),
        x_scaler: inst.standardizer.clone(),
        y_scaler,
        epoch_losses,
    })
}

/// MLP regressor for mean-value targets (rental and housing prices).
pub fn train_region_regressor(inst: &RegionTaskInstance, cfg: &TrainConfig) -> Result<(RegionModel, MetricReport)> {
    if inst.targets.target_kind != TargetKind::MeanValue {
        return Err(BaselineError::WrongTargetKind {
            expected: TargetKind::MeanValue,
            found: inst.targets.target_kind,
        });
    }
    let model = fit_region(inst, cfg, false)?;
    let report = model.evaluate(inst)?;
    Ok((model, report))
}

/// MLP with a sigmoid head for intensity targets in [0, 1].
pub fn train_intensity_model(inst: &RegionTaskInstance, cfg: &TrainConfig) -> Result<(RegionModel, MetricReport)> {
    if inst.targets.target_kind != TargetKind::Intensity {
        return Err(BaselineError::WrongTargetKind {
            expected: TargetKind::Intensity,
            found: inst.targets.target_kind,
        });
    }
    for &c in inst.train_cells().iter().chain(inst.test_cells()) {
        let v = inst.target(c);
        if !(0.0..=1.0).contains(&v) {
            return Err(BaselineError::TargetOutOfRange { cell: c, value: v });
        }
    }
    let model = fit_region(inst, cfg, true)?;
    let report = model.evaluate(inst)?;
    Ok((model, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqTask {
    Tte,
    Hmp,
}

/// Segmented trajectories plus the embedding lookup used as model input.
#[derive(Clone, Debug)]
pub struct SequenceTaskInstance {
    pub trajectories: Vec<SegmentedTrajectory>,
    pub embeddings: EmbeddingMatrix,
    pub manifest: SplitManifest,
    pub task: SeqTask,
    /// Fitted on the cells of training trajectories only.
    pub standardizer: Standardizer,
    /// Cell occurrences in training and test inputs without an embedding.
    pub missing_embeddings: usize,
    pub fit_ids: BTreeSet<String>,
    train: Vec<usize>,
    test: Vec<usize>,
}

impl SequenceTaskInstance {
    pub fn new(
        trajectories: Vec<SegmentedTrajectory>,
        embeddings: EmbeddingMatrix,
        manifest: SplitManifest,
        task: SeqTask,
    ) -> Result<Self> {
        let train_ids: BTreeSet<&String> = manifest.train.iter().collect();
        let test_ids: BTreeSet<&String> = manifest.test.iter().collect();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, t) in trajectories.iter().enumerate() {
            if t.x.cells.is_empty() {
                return Err(BaselineError::EmptySequence(t.id.clone()));
            }
            if task == SeqTask::Tte && !(t.x.duration_s > 0.0) {
                return Err(BaselineError::NonPositiveDuration(t.id.clone()));
            }
            if train_ids.contains(&t.id) {
                train.push(i);
            } else if test_ids.contains(&t.id) {
                test.push(i);
            }
        }
        if train.is_empty() {
            return Err(BaselineError::EmptyTrainSet);
        }
        let dim = embeddings.dim;
        let zero = vec![0.0; dim];
        let mut missing = 0;
        let mut rows: Vec<&[f64]> = Vec::new();
        for &i in train.iter().chain(&test) {
            let is_train = train.binary_search(&i).is_ok();
            for c in trajectories[i].full_path() {
                let e = embeddings.get(&c);
                if e.is_none() {
                    missing += 1;
                }
                if is_train {
                    rows.push(e.unwrap_or(&zero));
                }
            }
        }
        if missing > 0 {
            log::warn!("{missing} trajectory cells have no embedding; using zero vectors");
        }
        let standardizer = Standardizer::fit(rows, dim);
        let fit_ids = train.iter().map(|&i| trajectories[i].id.clone()).collect();
        Ok(Self {
            trajectories,
            embeddings,
            manifest,
            task,
            standardizer,
            missing_embeddings: missing,
            fit_ids,
            train,
            test,
        })
    }

    pub fn train_set(&self) -> impl Iterator<Item = &SegmentedTrajectory> {
        self.train.iter().map(|&i| &self.trajectories[i])
    }

    pub fn test_set(&self) -> impl Iterator<Item = &SegmentedTrajectory> {
        self.test.iter().map(|&i| &self.trajectories[i])
    }

    fn check_task(&self, expected: SeqTask) -> Result<()> {
        if self.task != expected {
            return Err(BaselineError::WrongTask {
                expected,
                found: self.task,
            });
        }
        Ok(())
    }
}

/// Standardized embedding lookup with a zero fallback for unseen cells.
#[derive(Clone, Debug)]
struct Lookup<'a> {
    embeddings: &'a EmbeddingMatrix,
    scaler: &'a Standardizer,
}

impl Lookup<'_> {
    fn get(&self, c: CellId) -> (Vec<f64>, bool) {
        match self.embeddings.get(&c) {
            Some(v) => (self.scaler.apply(v), true),
            None => (self.scaler.apply(&vec![0.0; self.embeddings.dim]), false),
        }
    }
}

/// Padded timestep inputs for a batch of cell sequences.
fn timestep_inputs(seqs: &[Vec<Vec<f64>>], dim: usize) -> Result<Vec<Tensor2>> {
    let t_max = seqs.iter().map(Vec::len).max().unwrap_or(0);
    (0..t_max)
        .map(|t| {
            let mut x = Tensor2::zeros(seqs.len(), dim);
            for (b, s) in seqs.iter().enumerate() {
                if let Some(v) = s.get(t) {
                    x.row_mut(b).copy_from_slice(v);
                }
            }
            Ok(x)
        })
        .collect()
}

/// Batches of similar length: shuffle, stable-sort by length, chunk, then
/// shuffle the chunk order.
fn length_batches(idx: &[usize], lengths: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TteMeta {
    config: TrainConfig,
    x_scaler: Standardizer,
    y_scale: f64,
}

/// Travel-time regressor: stacked LSTM, last hidden state, linear + ReLU head.
#[derive(Clone, Debug)]
pub struct TteModel {
    pub store: ParamStore,
    lstm: Lstm,
    head: Dense,
    pub config: TrainConfig,
    pub x_scaler: Standardizer,
    /// Durations are divided by this (the mean training duration) for fitting.
    pub y_scale: f64,
    pub epoch_losses: Vec<f64>,
}

/// The cells a travel-time model reads: the whole path, since the target is
/// the duration of the whole trip.
fn tte_cells(t: &SegmentedTrajectory) -> Vec<CellId> {
    t.full_path()
}

impl TteModel {
    fn forward(&self, store: &ParamStore, seqs: &[Vec<Vec<f64>>]) -> Result<TteForward> {
        let dim = self.x_scaler.dim();
        let xs = timestep_inputs(seqs, dim)?;
        let (outs, cache) = self.lstm.forward_seq(store, &xs)?;
        let hidden = self.lstm.hidden();
        let mut last = Tensor2::zeros(seqs.len(), hidden);
        for (b, s) in seqs.iter().enumerate() {
            last.row_mut(b).copy_from_slice(outs[s.len() - 1].row(b));
        }
        let z = self.head.forward(store, &last)?;
        Ok(TteForward {
            pred: relu(&z),
            z,
            last,
            cache,
            steps: outs.len(),
        })
    }

    /// Predicted durations in seconds.
    pub fn predict(&self, inst: &SequenceTaskInstance, trajs: &[&SegmentedTrajectory]) -> Result<Vec<f64>> {
        let lookup = Lookup {
            embeddings: &inst.embeddings,
            scaler: &self.x_scaler,
        };
        trajs
            .par_iter()
            .map(|t| {
                let seq: Vec<Vec<f64>> = tte_cells(t).into_iter().map(|c| lookup.get(c).0).collect();
                let f = self.forward(&self.store, &[seq])?;
                Ok(f.pred.get(0, 0) * self.y_scale)
            })
            .collect()
    }

    pub fn evaluate(&self, inst: &SequenceTaskInstance) -> Result<MetricReport> {
        let test: Vec<&SegmentedTrajectory> = inst.test_set().collect();
        if test.is_empty() {
            return Err(BaselineError::EmptyTestSet);
        }
        let y: Vec<f64> = test.iter().map(|t| t.x.duration_s).collect();
        let yhat = self.predict(inst, &test)?;
        let mut report = regression_metrics(&y, &yhat)?;
        report.task = "tte".into();
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = TteMeta {
            config: self.config.clone(),
            x_scaler: self.x_scaler.clone(),
            y_scale: self.y_scale,
        };
        Checkpoint::capture(&self.store, &self.config.hash(), serde_json::to_value(meta).expect("meta serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: TteMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| BaselineError::Checkpoint(e.to_string()))?;
        let store = ck.restore()?;
        Ok(Self {
            lstm: Lstm::bind(&store, "tte.lstm", meta.config.lstm_layers)?,
            head: Dense::bind(&store, "tte.head")?,
            store,
            config: meta.config,
            x_scaler: meta.x_scaler,
            y_scale: meta.y_scale,
            epoch_losses: Vec::new(),
        })
    }
}

struct TteForward {
    pred: Tensor2,
    z: Tensor2,
    last: Tensor2,
    cache: obsr_nn::lstm::LstmSeqCache,
    steps: usize,
}

/// Travel-time estimation from the cell sequence of each trajectory.
pub fn train_tte(inst: &SequenceTaskInstance, cfg: &TrainConfig) -> Result<(TteModel, MetricReport)> {
    inst.check_task(SeqTask::Tte)?;
    cfg.validate()?;
    let train: Vec<&SegmentedTrajectory> = inst.train_set().collect();
    let y_scale = train.iter().map(|t| t.x.duration_s).sum::<f64>() / train.len() as f64;
    let dim = inst.embeddings.dim;
    let mut store = ParamStore::new();
    let mut init = rng_for(cfg.seed, "tte.init");
    let lstm = Lstm::new(&mut store, "tte.lstm", dim, cfg.lstm_hidden, cfg.lstm_layers, &mut init);
    let head = Dense::new(&mut store, "tte.head", cfg.lstm_hidden, 1, &mut init);
    // Positive start (targets average 1) so the ReLU head is active.
    store.value_mut(head.b).fill(0.5);
    let mut model = TteModel {
        store,
        lstm,
        head,
        config: cfg.clone(),
        x_scaler: inst.standardizer.clone(),
        y_scale,
        epoch_losses: Vec::new(),
    };

    let lookup = Lookup {
        embeddings: &inst.embeddings,
        scaler: &inst.standardizer,
    };
    let seqs: Vec<Vec<Vec<f64>>> = train
        .iter()
        .map(|t| tte_cells(t).into_iter().map(|c| lookup.get(c).0).collect())
        .collect();
    let targets: Vec<f64> = train.iter().map(|t| t.x.duration_s / y_scale).collect();
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle = rng_for(cfg.seed, "tte.shuffle");
    let adam = cfg.adam();
    let hidden = cfg.lstm_hidden;
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in length_batches(&idx, &lengths, cfg.batch_size, &mut shuffle) {
            let bs: Vec<Vec<Vec<f64>>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let yb = Tensor2::from_vec(batch.len(), 1, batch.iter().map(|&i| targets[i]).collect())?;
            let f = model.forward(&model.store, &bs)?;
            let (l, dpred) = pointwise_loss(cfg.loss, &f.pred, &yb)?;
            model.store.zero_grads();
            let dz = relu_backward(&f.z, &dpred)?;
            let dlast = model.head.backward(&mut model.store, &f.last, &dz)?;
            let mut d_outs = vec![Tensor2::zeros(batch.len(), hidden); f.steps];
            for (b, s) in bs.iter().enumerate() {
                d_outs[s.len() - 1].row_mut(b).copy_from_slice(dlast.row(b));
            }
            model.lstm.backward_seq(&mut model.store, &f.cache, &d_outs)?;
            model.store.adam_step(&adam)?;
            total += l * batch.len() as f64;
        }
        model.epoch_losses.push(total / seqs.len() as f64);
    }
    let report = model.evaluate(inst)?;
    Ok((model, report))
}

/// Number of direction classes.
const N_CLASSES: usize = DirectionLabel::COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct HmpMeta {
    config: TrainConfig,
    x_scaler: Standardizer,
}

/// Next-region model: stacked LSTM, causal multi-head self-attention and a
/// per-step six-way direction classifier.
#[derive(Clone, Debug)]
pub struct HmpModel {
    pub store: ParamStore,
    lstm: Lstm,
    attn: MultiHeadAttention,
    head: Dense,
    pub config: TrainConfig,
    pub x_scaler: Standardizer,
    pub epoch_losses: Vec<f64>,
}

struct HmpForward {
    logits: Tensor2,
    attended: Tensor2,
    lstm_cache: obsr_nn::lstm::LstmSeqCache,
    attn_cache: obsr_nn::attention::AttentionCache,
    steps: usize,
}

/// Ground-truth class and geo cost of each step of a path.
struct StepTargets {
    labels: Vec<usize>,
    costs: Vec<[f64; N_CLASSES]>,
}

fn step_targets(cells: &[CellId]) -> Result<StepTargets> {
    let labels = encode_directions(cells)?.into_iter().map(DirectionLabel::index).collect();
    let costs = cells
        .windows(2)
        .map(|w| {
            let gold = w[1].centroid();
            let mut row = [0.0; N_CLASSES];
            for d in DirectionLabel::all() {
                let cand = w[0].neighbor(d)?;
                row[d.index()] = haversine(cand.centroid(), gold).ln_1p();
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    Ok(StepTargets { labels, costs })
}

/// Full-window rollout result of one test trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub id: String,
    pub predicted: Vec<CellId>,
    pub gold: Vec<CellId>,
    /// Predicted cells that had no embedding and were fed back as zeros.
    pub unseen: usize,
}

impl HmpModel {
    fn forward(&self, store: &ParamStore, seqs: &[Vec<Vec<f64>>]) -> Result<HmpForward> {
        let dim = self.x_scaler.dim();
        let xs = timestep_inputs(seqs, dim)?;
        let steps = xs.len();
        let (outs, lstm_cache) = self.lstm.forward_seq(store, &xs)?;
        let hidden = self.lstm.hidden();
        let mut stacked = Tensor2::zeros(seqs.len() * steps, hidden);
        for (t, o) in outs.iter().enumerate() {
            for b in 0..seqs.len() {
                stacked.row_mut(b * steps + t).copy_from_slice(o.row(b));
            }
        }
        let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let (attended, attn_cache) = self.attn.forward(store, &stacked, steps, Some(&lengths))?;
        let logits = self.head.forward(store, &attended)?;
        Ok(HmpForward {
            logits,
            attended,
            lstm_cache,
            attn_cache,
            steps,
        })
    }

    fn backward(&self, store: &mut ParamStore, f: &HmpForward, dlogits: &Tensor2, batch: usize) -> Result<()> {
        let dattended = self.head.backward(store, &f.attended, dlogits)?;
        let dstacked = self.attn.backward(store, &f.attn_cache, &dattended)?;
        let hidden = self.lstm.hidden();
        let d_outs: Vec<Tensor2> = (0..f.steps)
            .map(|t| {
                let mut d = Tensor2::zeros(batch, hidden);
                for b in 0..batch {
                    d.row_mut(b).copy_from_slice(dstacked.row(b * f.steps + t));
                }
                d
            })
            .collect();
        self.lstm.backward_seq(store, &f.lstm_cache, &d_outs)?;
        Ok(())
    }

    /// Feed X, then repeatedly append the neighbor in the predicted direction,
    /// `|Y|` times. Each step moves to a grid neighbor, so the rollout is
    /// contiguous by construction.
    pub fn rollout(&self, inst: &SequenceTaskInstance, t: &SegmentedTrajectory) -> Result<Rollout> {
        let lookup = Lookup {
            embeddings: &inst.embeddings,
            scaler: &self.x_scaler,
        };
        let mut seq: Vec<Vec<f64>> = t.x.cells.iter().map(|&c| lookup.get(c).0).collect();
        let mut cur = *t.x.cells.last().ok_or_else(|| BaselineError::EmptySequence(t.id.clone()))?;
        let mut predicted = Vec::with_capacity(t.y.len());
        let mut unseen = 0;
        for _ in 0..t.y.len() {
            let f = self.forward(&self.store, std::slice::from_ref(&seq))?;
            let row = f.logits.row(f.steps - 1);
            let best = (0..N_CLASSES)
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("six classes");
            cur = cur.neighbor(DirectionLabel::new(best as u8)?)?;
            predicted.push(cur);
            let (e, seen) = lookup.get(cur);
            if !seen {
                unseen += 1;
            }
            seq.push(e);
        }
        Ok(Rollout {
            id: t.id.clone(),
            predicted,
            gold: t.y.clone(),
            unseen,
        })
    }

    pub fn rollouts(&self, inst: &SequenceTaskInstance) -> Result<Vec<Rollout>> {
        let test: Vec<&SegmentedTrajectory> = inst.test_set().collect();
        test.par_iter().map(|t| self.rollout(inst, t)).collect()
    }

    /// One report per horizon in `ks`.
    pub fn evaluate(&self, inst: &SequenceTaskInstance, ks: &[usize]) -> Result<Vec<MetricReport>> {
        let rollouts = self.rollouts(inst)?;
        if rollouts.is_empty() {
            return Err(BaselineError::EmptyTestSet);
        }
        let unseen: usize = rollouts.iter().map(|r| r.unseen).sum();
        if unseen > 0 {
            log::info!("{unseen} rollout cells had no embedding and were fed as zeros");
        }
        let pairs: Vec<(Vec<CellId>, Vec<CellId>)> =
            rollouts.into_iter().map(|r| (r.predicted, r.gold)).collect();
        let mut reports = evaluate_at_k(&pairs, ks)?;
        for r in &mut reports {
            r.counts.insert("unseen_cells".into(), unseen);
        }
        Ok(reports)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = HmpMeta {
            config: self.config.clone(),
            x_scaler: self.x_scaler.clone(),
        };
        Checkpoint::capture(&self.store, &self.config.hash(), serde_json::to_value(meta).expect("meta serializes"))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: HmpMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| BaselineError::Checkpoint(e.to_string()))?;
        let store = ck.restore()?;
        Ok(Self {
            lstm: Lstm::bind(&store, "hmp.lstm", meta.config.lstm_layers)?,
            attn: MultiHeadAttention::bind(
                &store,
                "hmp.attn",
                meta.config.attention_heads,
                meta.config.causal_attention,
            )?,
            head: Dense::bind(&store, "hmp.head")?,
            store,
            config: meta.config,
            x_scaler: meta.x_scaler,
            epoch_losses: Vec::new(),
        })
    }
}

/// Geo weight implied by the configured loss.
fn hmp_geo_weight(cfg: &TrainConfig) -> Result<f64> {
    match cfg.loss {
        LossKind::HybridHmp => Ok(cfg.geo_weight),
        LossKind::CrossEntropy => Ok(0.0),
        other => Err(BaselineError::UnsupportedLoss(other)),
    }
}

/// Train on full paths with teacher forcing: every position sees the gold
/// cells before it and predicts the direction of the next step.
pub fn train_hmp_model(inst: &SequenceTaskInstance, cfg: &TrainConfig) -> Result<HmpModel> {
    inst.check_task(SeqTask::Hmp)?;
    cfg.validate()?;
    let geo_weight = hmp_geo_weight(cfg)?;
    let train: Vec<&SegmentedTrajectory> = inst.train_set().collect();
    let dim = inst.embeddings.dim;
    let mut store = ParamStore::new();
    let mut init = rng_for(cfg.seed, "hmp.init");
    let lstm = Lstm::new(&mut store, "hmp.lstm", dim, cfg.lstm_hidden, cfg.lstm_layers, &mut init);
    let attn = MultiHeadAttention::new(
        &mut store,
        "hmp.attn",
        cfg.lstm_hidden,
        cfg.attention_heads,
        cfg.causal_attention,
        &mut init,
    )?;
    let head = Dense::new(&mut store, "hmp.head", cfg.lstm_hidden, N_CLASSES, &mut init);
    let mut model = HmpModel {
        store,
        lstm,
        attn,
        head,
        config: cfg.clone(),
        x_scaler: inst.standardizer.clone(),
        epoch_losses: Vec::new(),
    };

    let lookup = Lookup {
        embeddings: &inst.embeddings,
        scaler: &inst.standardizer,
    };
    let paths: Vec<Vec<CellId>> = train.iter().map(|t| t.full_path()).collect();
    let seqs: Vec<Vec<Vec<f64>>> = paths
        .iter()
        .map(|p| p.iter().map(|&c| lookup.get(c).0).collect())
        .collect();
    let targets: Vec<StepTargets> = paths.iter().map(|p| step_targets(p)).collect::<Result<_>>()?;
    let lengths: Vec<usize> = seqs.iter().map(Vec::len).collect();
    let idx: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle = rng_for(cfg.seed, "hmp.shuffle");
    let adam = cfg.adam();
    let mut store = std::mem::replace(&mut model.store, ParamStore::new());
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let mut steps = 0usize;
        for batch in length_batches(&idx, &lengths, cfg.batch_size, &mut shuffle) {
            let bs: Vec<Vec<Vec<f64>>> = batch.iter().map(|&i| seqs[i].clone()).collect();
            let f = model.forward(&store, &bs)?;
            let mut classes = vec![None; batch.len() * f.steps];
            let mut costs = Tensor2::zeros(batch.len() * f.steps, N_CLASSES);
            for (b, &i) in batch.iter().enumerate() {
                for (t, (&l, c)) in targets[i].labels.iter().zip(&targets[i].costs).enumerate() {
                    classes[b * f.steps + t] = Some(l);
                    costs.row_mut(b * f.steps + t).copy_from_slice(c);
                }
            }
            let n_valid = classes.iter().filter(|c| c.is_some()).count();
            let (l, dlogits) = loss::hybrid_geo_loss(&f.logits, &classes, Some(&costs), geo_weight)?;
            store.zero_grads();
            model.backward(&mut store, &f, &dlogits, batch.len())?;
            store.adam_step(&adam)?;
            total += l * n_valid as f64;
            steps += n_valid;
        }
        model.epoch_losses.push(total / steps.max(1) as f64);
    }
    model.store = store;
    Ok(model)
}

/// Train, then evaluate rollouts at the standard horizons.
pub fn train_hmp(inst: &SequenceTaskInstance, cfg: &TrainConfig) -> Result<(HmpModel, Vec<MetricReport>)> {
    let model = train_hmp_model(inst, cfg)?;
    let reports = model.evaluate(inst, &DEFAULT_KS)?;
    Ok((model, reports))
}
