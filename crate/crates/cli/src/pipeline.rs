//! Stage-by-stage pipeline over an output directory. Every stage reads only
//! what earlier stages wrote, so each subcommand can also run on its own.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use obsr_core::baselines::{
    train_hmp_model, train_intensity_model, train_region_regressor, train_tte, HmpModel, RegionModel,
    RegionTaskInstance, SeqTask, SequenceTaskInstance, TteModel,
};
use obsr_core::embed::{
    contextual_count_embed, count_embed, default_tag_filter, ingest_feature_counts, load_tag_filter,
    tagged_points, EmbeddingMatrix,
};
use obsr_core::hexgrid::{CellId, GeoPoint};
use obsr_core::ingest::{
    load_points, load_trajectories, points_csv_descriptor, write_points_csv, write_trajectories_jsonl,
    DatasetFormat, IdManifest, ManifestMode, PointRecord, RawDatasetDescriptor, Trajectory,
};
use obsr_core::metrics::{layout_for, markdown_table, MetricReport, TableColumn};
use obsr_core::regionize::{multi_resolution, NormalizationScope, RegionDataset, TargetKind};
use obsr_core::splitter::{segment_xy, split_regions, split_trajectories, SplitManifest};
use obsr_core::synthdata::generate;
use obsr_core::trajprep::{prepare, read_prepared_jsonl, write_prepared_jsonl, HexTrajectory};
use obsr_nn::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    collect_artifacts, emit_choropleth, emit_histogram, sha256_bytes, sha256_file, RunManifest, MANIFEST_FILE,
    TIMING_FILE,
};
use crate::config::{DataSource, EmbedderConfig, PipelineConfig, Task};
use crate::error::{Result, Stage, StageExt};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub items: usize,
    pub input_rows: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub dataset: LoadSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<LoadSummary>,
}

/// Training record written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub embedder: String,
    pub resolution: u8,
    pub run: usize,
    pub train_config: obsr_nn::TrainConfig,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub epoch_losses: Vec<f64>,
}

/// Evaluation of one embedder at one resolution over all runs. Each inner
/// list holds one report, or one per horizon for the mobility task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub embedder: String,
    pub display_name: String,
    pub resolution: u8,
    pub runs: Vec<Vec<MetricReport>>,
    pub mean: Vec<MetricReport>,
    pub std: Vec<MetricReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunTiming {
    pub threads: usize,
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
    /// Whether the previous manifest in this directory matched, when one existed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_manifest_matched: Option<bool>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub timing: RunTiming,
    pub report: String,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Mean and population standard deviation of every entry across runs.
fn aggregate(runs: &[Vec<MetricReport>]) -> (Vec<MetricReport>, Vec<MetricReport>) {
    let n = runs.len() as f64;
    let first = &runs[0];
    let mut means = Vec::with_capacity(first.len());
    let mut stds = Vec::with_capacity(first.len());
    for (i, template) in first.iter().enumerate() {
        let mut mean = template.clone();
        let mut std = template.clone();
        for key in template.entries.keys() {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r[i].get(key)).collect();
            let m = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            mean.insert(key, m);
            std.insert(key, var.sqrt());
        }
        mean.counts.insert("runs".into(), runs.len());
        std.counts.insert("runs".into(), runs.len());
        means.push(mean);
        stds.push(std);
    }
    (means, stds)
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Self { cfg, out: out.into() }
    }

    fn dir(&self, sub: &str) -> anyhow::Result<PathBuf> {
        let d = self.out.join(sub);
        std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }

    fn res_dir(&self, r: u8) -> anyhow::Result<PathBuf> {
        self.dir(&format!("res{r}"))
    }

    fn points_path(&self) -> PathBuf {
        self.out.join("ingest").join("points.csv")
    }

    fn trajectories_path(&self) -> PathBuf {
        self.out.join("ingest").join("trajectories.jsonl")
    }

    fn features_path(&self) -> PathBuf {
        self.out.join("ingest").join("features.csv")
    }

    fn regions_path(&self, r: u8) -> PathBuf {
        self.out.join(format!("res{r}")).join("regions.csv")
    }

    fn prepared_path(&self, r: u8) -> PathBuf {
        self.out.join(format!("res{r}")).join("prepared.jsonl")
    }

    fn split_path(&self, r: u8) -> PathBuf {
        self.out.join(format!("res{r}")).join("split.json")
    }

    fn embedding_path(&self, r: u8, e: &EmbedderConfig) -> PathBuf {
        self.out.join(format!("res{r}")).join(format!("emb_{}.csv", e.slug()))
    }

    fn model_path(&self, r: u8, e: &EmbedderConfig, run: usize) -> PathBuf {
        self.out.join(format!("res{r}")).join(format!("model_{}_run{run}.json", e.slug()))
    }

    fn train_log_path(&self, r: u8, e: &EmbedderConfig, run: usize) -> PathBuf {
        self.out.join(format!("res{r}")).join(format!("train_{}_run{run}.json", e.slug()))
    }

    fn metrics_path(&self, r: u8, e: &EmbedderConfig) -> PathBuf {
        self.out.join(format!("res{r}")).join(format!("metrics_{}.json", e.slug()))
    }

    pub fn report_path(&self) -> PathBuf {
        self.out.join("report.md")
    }

    fn require_region(&self, what: &str) -> Result<()> {
        if self.cfg.task.is_region() {
            Ok(())
        } else {
            Err(anyhow!("{what} applies to region tasks, not {}", self.cfg.task.name())).stage(Stage::Config)
        }
    }

    fn require_sequence(&self, what: &str) -> Result<()> {
        if self.cfg.task.is_region() {
            Err(anyhow!("{what} applies to trajectory tasks, not {}", self.cfg.task.name())).stage(Stage::Config)
        } else {
            Ok(())
        }
    }

    // ---- ingest ----

    fn load_point_source(src: &DataSource) -> anyhow::Result<(Vec<PointRecord>, LoadSummary)> {
        match src {
            DataSource::Synthetic { spec } => {
                let points = generate(spec)?
                    .points()
                    .ok_or_else(|| anyhow!("synthetic kind {:?} does not produce points", spec.kind))?;
                let s = LoadSummary {
                    items: points.len(),
                    input_rows: points.len(),
                    dropped: 0,
                };
                Ok((points, s))
            }
            DataSource::File { descriptor } => {
                let l = load_points(descriptor)?;
                let s = LoadSummary {
                    items: l.items.len(),
                    input_rows: l.input_rows,
                    dropped: l.dropped,
                };
                Ok((l.items, s))
            }
        }
    }

    fn load_trajectory_source(src: &DataSource) -> anyhow::Result<(Vec<Trajectory>, LoadSummary)> {
        match src {
            DataSource::Synthetic { spec } => {
                let trajs = generate(spec)?
                    .trajectories()
                    .ok_or_else(|| anyhow!("synthetic kind {:?} does not produce trajectories", spec.kind))?;
                let s = LoadSummary {
                    items: trajs.len(),
                    input_rows: trajs.len(),
                    dropped: 0,
                };
                Ok((trajs, s))
            }
            DataSource::File { descriptor } => {
                let l = load_trajectories(descriptor)?;
                let s = LoadSummary {
                    items: l.items.len(),
                    input_rows: l.input_rows,
                    dropped: l.dropped,
                };
                Ok((l.items, s))
            }
        }
    }

    /// Load or synthesize the raw data and write normalized copies under `ingest/`.
    pub fn ingest(&self) -> Result<IngestSummary> {
        let go = || -> anyhow::Result<IngestSummary> {
            let dir = self.dir("ingest")?;
            let dataset = if self.cfg.task.is_region() {
                let (points, s) = Self::load_point_source(&self.cfg.dataset)?;
                if self.cfg.task.target_kind() == TargetKind::MeanValue && points.iter().any(|p| p.target.is_none()) {
                    bail!("{} needs a target on every point", self.cfg.task.name());
                }
                write_points_csv(&points, &self.points_path())?;
                s
            } else {
                let (trajs, s) = Self::load_trajectory_source(&self.cfg.dataset)?;
                write_trajectories_jsonl(&trajs, &self.trajectories_path())?;
                s
            };
            let features = match &self.cfg.features {
                Some(f) => {
                    let (points, s) = Self::load_point_source(&f.dataset)?;
                    write_points_csv(&points, &self.features_path())?;
                    Some(s)
                }
                None => None,
            };
            let summary = IngestSummary { dataset, features };
            write_json(&dir.join("summary.json"), &summary)?;
            Ok(summary)
        };
        go().stage(Stage::Ingest)
    }

    fn read_points(&self) -> anyhow::Result<Vec<PointRecord>> {
        let with_target = self.cfg.task.target_kind() == TargetKind::MeanValue;
        Ok(load_points(&points_csv_descriptor(self.points_path(), with_target))?.items)
    }

    fn read_trajectories(&self) -> anyhow::Result<Vec<Trajectory>> {
        let desc = RawDatasetDescriptor::new(DatasetFormat::TrajectoryJsonl, self.trajectories_path());
        Ok(load_trajectories(&desc)?.items)
    }

    // ---- prepare ----

    /// Aggregate points per cell at every resolution, with a choropleth and a
    /// target histogram per resolution.
    pub fn regionize(&self) -> Result<BTreeMap<u8, RegionDataset>> {
        self.require_region("regionize")?;
        let go = || -> anyhow::Result<BTreeMap<u8, RegionDataset>> {
            let points = self.read_points()?;
            let kind = self.cfg.task.target_kind();
            let by_res = multi_resolution(&points, &self.cfg.resolutions, kind)?;
            let range = (kind == TargetKind::Intensity).then_some((0.0, 1.0));
            for (&r, ds) in &by_res {
                let dir = self.res_dir(r)?;
                ds.write(&self.regions_path(r))?;
                emit_choropleth(ds, &dir.join("regions.geojson"))?;
                emit_histogram(&ds.targets(), self.cfg.histogram_bins, range, &dir.join("target_hist.csv"))?;
            }
            Ok(by_res)
        };
        go().stage(Stage::Prepare)
    }

    /// Snap trajectories to the grid, fill gaps, and write the prepared paths.
    pub fn hexify(&self) -> Result<Vec<HexTrajectory>> {
        self.require_sequence("hexify")?;
        let go = || -> anyhow::Result<Vec<HexTrajectory>> {
            let r = self.cfg.resolutions[0];
            let trajs = self.read_trajectories()?;
            let (hex, stats) = prepare(&trajs, r, self.cfg.gap)?;
            if hex.len() < 2 {
                bail!("only {} trajectories survived preparation", hex.len());
            }
            let dir = self.res_dir(r)?;
            write_prepared_jsonl(&hex, &self.prepared_path(r))?;
            write_json(&dir.join("prep_stats.json"), &stats)?;
            let durations: Vec<f64> = hex.iter().map(|h| h.duration_s).collect();
            emit_histogram(&durations, self.cfg.histogram_bins, None, &dir.join("duration_hist.csv"))?;
            Ok(hex)
        };
        go().stage(Stage::Prepare)
    }

    fn read_regions(&self, r: u8) -> anyhow::Result<RegionDataset> {
        Ok(RegionDataset::read(&self.regions_path(r)).with_context(|| format!("regions at res {r}; run regionize first"))?)
    }

    fn read_prepared(&self, r: u8) -> anyhow::Result<Vec<HexTrajectory>> {
        Ok(read_prepared_jsonl(&self.prepared_path(r)).with_context(|| format!("prepared trajectories at res {r}; run hexify first"))?)
    }

    fn read_split(&self, r: u8) -> anyhow::Result<SplitManifest> {
        let text = std::fs::read_to_string(self.split_path(r))
            .with_context(|| format!("split at res {r}; run split first"))?;
        Ok(SplitManifest::from_json(&text)?)
    }

    /// Split from a fixed id list, restricted to the ids present.
    fn manifest_split(&self, path: &Path, ids: &[String], r: u8) -> anyhow::Result<SplitManifest> {
        let m = IdManifest::load(path)?;
        let known: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        let unknown = m.train.iter().chain(&m.test).filter(|id| !known.contains(id.as_str())).count();
        if unknown > 0 && self.cfg.split.manifest_mode == ManifestMode::Strict {
            bail!("{unknown} manifest ids are not in the dataset");
        }
        let keep = |v: &[String]| -> Vec<String> {
            let mut v: Vec<String> = v.iter().filter(|id| known.contains(id.as_str())).cloned().collect();
            v.sort();
            v
        };
        let (train, test) = (keep(&m.train), keep(&m.test));
        if train.is_empty() || test.is_empty() {
            bail!("manifest leaves an empty side after matching ids");
        }
        Ok(SplitManifest {
            train,
            test,
            config: self.cfg.split_config(r),
            bucket_report: Vec::new(),
        })
    }

    /// Assign whole cells (or whole trajectories) to train or test.
    pub fn split(&self) -> Result<BTreeMap<u8, SplitManifest>> {
        let go = || -> anyhow::Result<BTreeMap<u8, SplitManifest>> {
            let mut out = BTreeMap::new();
            for &r in &self.cfg.resolutions {
                let cfg = self.cfg.split_config(r);
                let manifest = if self.cfg.task.is_region() {
                    let ds = self.read_regions(r)?;
                    match &self.cfg.split.manifest {
                        Some(p) => {
                            let ids: Vec<String> = ds.cells().iter().map(CellId::to_string).collect();
                            self.manifest_split(p, &ids, r)?
                        }
                        None => split_regions(&ds, &cfg)?,
                    }
                } else {
                    let hex = self.read_prepared(r)?;
                    match &self.cfg.split.manifest {
                        Some(p) => {
                            let ids: Vec<String> = hex.iter().map(|h| h.id.clone()).collect();
                            self.manifest_split(p, &ids, r)?
                        }
                        None => split_trajectories(&hex, &cfg)?,
                    }
                };
                std::fs::write(self.split_path(r), manifest.to_json()?)?;
                out.insert(r, manifest);
            }
            Ok(out)
        };
        go().stage(Stage::Prepare)
    }

    fn study_cells(&self, r: u8) -> anyhow::Result<Vec<CellId>> {
        if self.cfg.task.is_region() {
            Ok(self.read_regions(r)?.cells())
        } else {
            let cells: BTreeSet<CellId> = self
                .read_prepared(r)?
                .into_iter()
                .flat_map(|h| h.cells)
                .collect();
            Ok(cells.into_iter().collect())
        }
    }

    /// Embed every study cell with every configured embedder.
    pub fn embed(&self) -> Result<()> {
        let go = || -> anyhow::Result<()> {
            let tagged: Option<(Vec<(GeoPoint, String)>, Vec<String>)> = match &self.cfg.features {
                Some(f) => {
                    let points = load_points(&points_csv_descriptor(self.features_path(), false))
                        .context("features; run ingest first")?
                        .items;
                    let filter = match &f.filter {
                        Some(p) => load_tag_filter(p)?,
                        None => default_tag_filter(),
                    };
                    Some((tagged_points(&points, &f.column), filter))
                }
                None => None,
            };
            for &r in &self.cfg.resolutions {
                self.res_dir(r)?;
                let cells = self.study_cells(r)?;
                let table = match &tagged {
                    Some((records, filter)) => Some(ingest_feature_counts(records, r, filter)?),
                    None => None,
                };
                for e in &self.cfg.embedders {
                    let m = match (e, &table) {
                        (EmbedderConfig::Ce, Some(t)) => count_embed(t, &cells)?,
                        (EmbedderConfig::Cce { k, mode }, Some(t)) => contextual_count_embed(t, &cells, *k, *mode)?,
                        (EmbedderConfig::External { .. }, _) => {
                            let path = e.external_path(r).expect("external embedder has a path");
                            let m = EmbeddingMatrix::read(&path)
                                .with_context(|| format!("embedding matrix {}", path.display()))?;
                            if let Some(c) = m.vectors.keys().find(|c| c.resolution() != r) {
                                bail!("{} holds cell {c} at resolution {}, expected {r}", path.display(), c.resolution());
                            }
                            m
                        }
                        _ => bail!("embedder {} needs features", e.display_name()),
                    };
                    m.write(&self.embedding_path(r, e))?;
                }
            }
            Ok(())
        };
        go().stage(Stage::Prepare)
    }

    // ---- train / eval ----

    fn read_embedding(&self, r: u8, e: &EmbedderConfig) -> anyhow::Result<EmbeddingMatrix> {
        let p = self.embedding_path(r, e);
        Ok(EmbeddingMatrix::read(&p).with_context(|| format!("{}; run embed first", p.display()))?)
    }

    fn region_instance(&self, r: u8, e: &EmbedderConfig) -> anyhow::Result<RegionTaskInstance> {
        let mut ds = self.read_regions(r)?;
        let manifest = self.read_split(r)?;
        if self.cfg.task == Task::Cap && self.cfg.normalization_scope() == NormalizationScope::TrainOnly {
            ds = ds.renormalize_train_only(&manifest.train_cells()?)?;
        }
        Ok(RegionTaskInstance::new(self.read_embedding(r, e)?, ds, manifest)?)
    }

    fn sequence_instance(&self, r: u8, e: &EmbedderConfig) -> anyhow::Result<SequenceTaskInstance> {
        let segs = self
            .read_prepared(r)?
            .iter()
            .map(|h| segment_xy(h, self.cfg.target_fraction))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let task = match self.cfg.task {
            Task::Tte => SeqTask::Tte,
            _ => SeqTask::Hmp,
        };
        Ok(SequenceTaskInstance::new(segs, self.read_embedding(r, e)?, self.read_split(r)?, task)?)
    }

    fn input_hashes(&self, r: u8, e: &EmbedderConfig) -> anyhow::Result<BTreeMap<String, String>> {
        let data = if self.cfg.task.is_region() {
            self.regions_path(r)
        } else {
            self.prepared_path(r)
        };
        Ok(BTreeMap::from([
            ("dataset".to_string(), sha256_file(&data)?),
            ("split".to_string(), sha256_file(&self.split_path(r))?),
            ("embedding".to_string(), sha256_file(&self.embedding_path(r, e))?),
        ]))
    }

    /// Train every (resolution, embedder, run) combination and checkpoint it.
    pub fn train(&self) -> Result<()> {
        for &r in &self.cfg.resolutions {
            for e in &self.cfg.embedders {
                let inputs = self.input_hashes(r, e).stage(Stage::Train)?;
                if self.cfg.task.is_region() {
                    let inst = self.region_instance(r, e).stage(Stage::Train)?;
                    for run in 0..self.cfg.runs {
                        let tc = self.cfg.train_config(run);
                        let (model, _) = match self.cfg.task {
                            Task::Cap => train_intensity_model(&inst, &tc),
                            _ => train_region_regressor(&inst, &tc),
                        }
                        .stage(Stage::Train)?;
                        self.save(r, e, run, &tc, &inputs, model.checkpoint(), &model.epoch_losses)?;
                    }
                } else {
                    let inst = self.sequence_instance(r, e).stage(Stage::Train)?;
                    for run in 0..self.cfg.runs {
                        let tc = self.cfg.train_config(run);
                        let (ck, losses) = if self.cfg.task == Task::Tte {
                            let (m, _) = train_tte(&inst, &tc).stage(Stage::Train)?;
                            (m.checkpoint(), m.epoch_losses)
                        } else {
                            let m = train_hmp_model(&inst, &tc).stage(Stage::Train)?;
                            (m.checkpoint(), m.epoch_losses)
                        };
                        self.save(r, e, run, &tc, &inputs, ck, &losses)?;
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn save(
        &self,
        r: u8,
        e: &EmbedderConfig,
        run: usize,
        tc: &obsr_nn::TrainConfig,
        inputs: &BTreeMap<String, String>,
        ck: Checkpoint,
        losses: &[f64],
    ) -> Result<()> {
        let go = || -> anyhow::Result<()> {
            std::fs::write(self.model_path(r, e, run), ck.to_json())?;
            let log = TrainLog {
                embedder: e.slug(),
                resolution: r,
                run,
                train_config: tc.clone(),
                config_hash: tc.hash(),
                inputs: inputs.clone(),
                epoch_losses: losses.to_vec(),
            };
            write_json(&self.train_log_path(r, e, run), &log)
        };
        go().stage(Stage::Train)
    }

    fn load_checkpoint(&self, r: u8, e: &EmbedderConfig, run: usize) -> anyhow::Result<Checkpoint> {
        let p = self.model_path(r, e, run);
        let text = std::fs::read_to_string(&p).with_context(|| format!("{}; run train first", p.display()))?;
        Ok(Checkpoint::from_json(&text)?)
    }

    /// Evaluate restored checkpoints on the test side.
    pub fn eval(&self) -> Result<Vec<MetricsFile>> {
        let go = || -> anyhow::Result<Vec<MetricsFile>> {
            let mut files = Vec::new();
            for &r in &self.cfg.resolutions {
                for e in &self.cfg.embedders {
                    let mut runs = Vec::with_capacity(self.cfg.runs);
                    if self.cfg.task.is_region() {
                        let inst = self.region_instance(r, e)?;
                        for run in 0..self.cfg.runs {
                            let model = RegionModel::from_checkpoint(&self.load_checkpoint(r, e, run)?)?;
                            let mut report = model.evaluate(&inst)?;
                            report.task = self.cfg.task.name().into();
                            runs.push(vec![report]);
                        }
                    } else {
                        let inst = self.sequence_instance(r, e)?;
                        for run in 0..self.cfg.runs {
                            let ck = self.load_checkpoint(r, e, run)?;
                            let reports = if self.cfg.task == Task::Tte {
                                vec![TteModel::from_checkpoint(&ck)?.evaluate(&inst)?]
                            } else {
                                HmpModel::from_checkpoint(&ck)?.evaluate(&inst, &self.cfg.ks)?
                            };
                            runs.push(reports);
                        }
                    }
                    let (mean, std) = aggregate(&runs);
                    let file = MetricsFile {
                        embedder: e.slug(),
                        display_name: e.display_name(),
                        resolution: r,
                        runs,
                        mean,
                        std,
                    };
                    write_json(&self.metrics_path(r, e), &file)?;
                    files.push(file);
                }
            }
            Ok(files)
        };
        go().stage(Stage::Evaluate)
    }

    /// Markdown results tables from the metric files; written to `report.md`.
    pub fn report(&self) -> Result<String> {
        let go = || -> anyhow::Result<String> {
            let layout = layout_for(self.cfg.task.name()).expect("every task has a layout");
            let mut mean_cols = Vec::new();
            let mut std_cols = Vec::new();
            for &r in &self.cfg.resolutions {
                for e in &self.cfg.embedders {
                    let f: MetricsFile = read_json(&self.metrics_path(r, e)).context("run eval first")?;
                    let col = |reports: Vec<MetricReport>| TableColumn {
                        group: format!("Res {r}"),
                        name: f.display_name.clone(),
                        reports,
                    };
                    mean_cols.push(col(f.mean.clone()));
                    std_cols.push(col(f.std.clone()));
                }
            }
            let mut md = format!("# {}\n\nTask: {}\n\n", self.cfg.name, self.cfg.task.name().to_uppercase());
            if self.cfg.runs > 1 {
                md.push_str(&format!("Mean over {} runs.\n\n", self.cfg.runs));
            }
            md.push_str(&markdown_table(&layout, &mean_cols));
            if self.cfg.runs > 1 {
                md.push_str("\nStandard deviation:\n\n");
                md.push_str(&markdown_table(&layout, &std_cols));
            }
            std::fs::write(self.report_path(), &md)?;
            Ok(md)
        };
        go().stage(Stage::Evaluate)
    }

    /// Hash every artifact into `manifest.json`.
    pub fn write_manifest(&self) -> Result<RunManifest> {
        let go = || -> anyhow::Result<RunManifest> {
            let config_json = self.cfg.canonical_json();
            let manifest = RunManifest {
                name: self.cfg.name.clone(),
                task: self.cfg.task.name().into(),
                config_sha256: sha256_bytes(config_json.as_bytes()),
                config: serde_json::from_str(&config_json)?,
                artifacts: collect_artifacts(&self.out)?,
            };
            std::fs::write(self.out.join(MANIFEST_FILE), manifest.to_json())?;
            Ok(manifest)
        };
        go().stage(Stage::Evaluate)
    }

    /// All stages in order, then the manifest and the timing file.
    pub fn run(&self) -> Result<RunSummary> {
        std::fs::create_dir_all(&self.out).stage(Stage::Ingest)?;
        let previous = std::fs::read(self.out.join(MANIFEST_FILE)).ok();
        let start = Instant::now();
        let mut stages = Vec::new();
        let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<()>| -> Result<()> {
            let t = Instant::now();
            f()?;
            log::info!("{name} done in {:.2}s", t.elapsed().as_secs_f64());
            stages.push(StageTiming {
                stage: name.into(),
                seconds: t.elapsed().as_secs_f64(),
            });
            Ok(())
        };
        timed("ingest", &mut || self.ingest().map(drop))?;
        if self.cfg.task.is_region() {
            timed("regionize", &mut || self.regionize().map(drop))?;
        } else {
            timed("hexify", &mut || self.hexify().map(drop))?;
        }
        timed("split", &mut || self.split().map(drop))?;
        timed("embed", &mut || self.embed())?;
        timed("train", &mut || self.train())?;
        timed("eval", &mut || self.eval().map(drop))?;
        let mut report = String::new();
        timed("report", &mut || {
            report = self.report()?;
            Ok(())
        })?;
        let manifest = self.write_manifest()?;
        let matched = previous.map(|p| p == manifest.to_json().as_bytes());
        if matched == Some(false) {
            log::warn!("manifest differs from the previous run in {}", self.out.display());
        }
        let timing = RunTiming {
            threads: rayon::current_num_threads(),
            stages,
            total_seconds: start.elapsed().as_secs_f64(),
            previous_manifest_matched: matched,
        };
        write_json(&self.out.join(TIMING_FILE), &timing).stage(Stage::Evaluate)?;
        Ok(RunSummary { manifest, timing, report })
    }
}
