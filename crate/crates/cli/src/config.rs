use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use obsr_core::embed::CceMode;
use obsr_core::ingest::{DatasetFormat, ManifestMode, RawDatasetDescriptor};
use obsr_core::metrics::DEFAULT_KS;
use obsr_core::regionize::{NormalizationScope, TargetKind, MAX_RESOLUTION, MIN_RESOLUTION};
use obsr_core::splitter::{
    SplitConfig, StratSource, DEFAULT_N_BINS, DEFAULT_TARGET_FRACTION, DEFAULT_TEST_FRACTION,
};
use obsr_core::synthdata::{SynthKind, SynthSpec};
use obsr_core::trajprep::GapConfig;
use obsr_nn::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, Stage, StageExt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Strpp,
    Hpp,
    Cap,
    Tte,
    Hmp,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Strpp, Task::Hpp, Task::Cap, Task::Tte, Task::Hmp];

    pub fn name(self) -> &'static str {
        match self {
            Task::Strpp => "strpp",
            Task::Hpp => "hpp",
            Task::Cap => "cap",
            Task::Tte => "tte",
            Task::Hmp => "hmp",
        }
    }

    pub fn is_region(self) -> bool {
        matches!(self, Task::Strpp | Task::Hpp | Task::Cap)
    }

    pub fn target_kind(self) -> TargetKind {
        match self {
            Task::Cap => TargetKind::Intensity,
            _ => TargetKind::MeanValue,
        }
    }

    pub fn default_train(self) -> TrainConfig {
        match self {
            Task::Strpp | Task::Hpp => TrainConfig::regression(),
            Task::Cap => TrainConfig::intensity(),
            Task::Tte => TrainConfig::tte(),
            Task::Hmp => TrainConfig::hmp(),
        }
    }

    pub fn default_strat(self) -> StratSource {
        match self {
            Task::Strpp | Task::Hpp | Task::Cap => StratSource::Target,
            Task::Tte => StratSource::Duration,
            Task::Hmp => StratSource::Length,
        }
    }
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { spec: SynthSpec },
    File { descriptor: RawDatasetDescriptor },
}

impl DataSource {
    fn yields_points(&self) -> bool {
        match self {
            DataSource::Synthetic { spec } => matches!(
                spec.kind,
                SynthKind::LinearPriceField | SynthKind::ClusteredIntensity | SynthKind::PoiFeatures
            ),
            DataSource::File { descriptor } => descriptor.format == DatasetFormat::PointCsv,
        }
    }

    fn resolve(&mut self, base: &Path) {
        if let DataSource::File { descriptor } = self {
            descriptor.path = resolve(base, &descriptor.path);
        }
    }
}

/// Tagged points feeding the count embedders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    pub dataset: DataSource,
    /// Text column holding `key=value` tags.
    #[serde(default = "default_tag_column")]
    pub column: String,
    /// JSON list of accepted tags; the bundled filter when absent.
    #[serde(default)]
    pub filter: Option<PathBuf>,
}

fn default_tag_column() -> String {
    "tag".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EmbedderConfig {
    Ce,
    Cce {
        #[serde(default = "default_k")]
        k: u32,
        #[serde(default)]
        mode: CceMode,
    },
    /// Precomputed matrix; `{res}` in the path is replaced by the resolution.
    External { name: String, path: PathBuf },
}

fn default_k() -> u32 {
    obsr_core::embed::DEFAULT_CCE_K
}

impl EmbedderConfig {
    /// Column header in report tables.
    pub fn display_name(&self) -> String {
        match self {
            EmbedderConfig::Ce => "CE".into(),
            EmbedderConfig::Cce { .. } => "CCE".into(),
            EmbedderConfig::External { name, .. } => name.clone(),
        }
    }

    /// File-name fragment, unique within a config.
    pub fn slug(&self) -> String {
        match self {
            EmbedderConfig::Ce => "ce".into(),
            EmbedderConfig::Cce { k, mode } => {
                let m = match mode {
                    CceMode::Concat => "concat",
                    CceMode::Squashed => "squashed",
                };
                format!("cce_k{k}_{m}")
            }
            EmbedderConfig::External { name, .. } => {
                let s: String = name
                    .chars()
                    .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
                    .collect();
                format!("ext_{s}")
            }
        }
    }

    pub fn needs_features(&self) -> bool {
        !matches!(self, EmbedderConfig::External { .. })
    }

    pub fn external_path(&self, r: u8) -> Option<PathBuf> {
        match self {
            EmbedderConfig::External { path, .. } => {
                Some(PathBuf::from(path.to_string_lossy().replace("{res}", &r.to_string())))
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSettings {
    pub n_bins: usize,
    pub test_fraction: f64,
    /// Task default when absent.
    pub strat_source: Option<StratSource>,
    /// Fixed train/test id lists instead of a computed split.
    pub manifest: Option<PathBuf>,
    pub manifest_mode: ManifestMode,
}

impl Default for SplitSettings {
    fn default() -> Self {
        Self {
            n_bins: DEFAULT_N_BINS,
            test_fraction: DEFAULT_TEST_FRACTION,
            strat_source: None,
            manifest: None,
            manifest_mode: ManifestMode::Strict,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub name: String,
    pub task: Task,
    pub dataset: DataSource,
    #[serde(default)]
    pub features: Option<FeatureConfig>,
    pub resolutions: Vec<u8>,
    #[serde(default)]
    pub split: SplitSettings,
    #[serde(default = "default_embedders")]
    pub embedders: Vec<EmbedderConfig>,
    /// Task defaults when absent.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub gap: GapConfig,
    #[serde(default = "default_target_fraction")]
    pub target_fraction: f64,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
    /// Intensity normalization; whole dataset unless set to train-only.
    #[serde(default)]
    pub normalization: Option<NormalizationScope>,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_embedders() -> Vec<EmbedderConfig> {
    vec![EmbedderConfig::Ce, EmbedderConfig::Cce { k: default_k(), mode: CceMode::default() }]
}

fn default_target_fraction() -> f64 {
    DEFAULT_TARGET_FRACTION
}

fn default_ks() -> Vec<usize> {
    DEFAULT_KS.to_vec()
}

fn default_bins() -> usize {
    20
}

fn default_runs() -> usize {
    1
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl PipelineConfig {
    /// Parse and validate. Relative paths are taken relative to `base`.
    pub fn from_json(s: &str, base: &Path) -> Result<Self> {
        let mut cfg: PipelineConfig = serde_json::from_str(s).context("invalid pipeline config").stage(Stage::Config)?;
        cfg.dataset.resolve(base);
        if let Some(f) = &mut cfg.features {
            f.dataset.resolve(base);
            f.filter = f.filter.as_ref().map(|p| resolve(base, p));
        }
        cfg.split.manifest = cfg.split.manifest.as_ref().map(|p| resolve(base, p));
        for e in &mut cfg.embedders {
            if let EmbedderConfig::External { path, .. } = e {
                *path = resolve(base, path);
            }
        }
        cfg.output_dir = cfg.output_dir.as_ref().map(|p| resolve(base, p));
        cfg.validate().stage(Stage::Config)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .stage(Stage::Config)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.resolutions.is_empty() {
            bail!("at least one resolution is required");
        }
        if let Some(r) = self.resolutions.iter().find(|r| !(MIN_RESOLUTION..=MAX_RESOLUTION).contains(*r)) {
            bail!("resolution {r} outside {MIN_RESOLUTION}..={MAX_RESOLUTION}");
        }
        let mut sorted = self.resolutions.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.resolutions.len() {
            bail!("duplicate resolutions");
        }
        if !self.task.is_region() && self.resolutions.len() != 1 {
            bail!("{} is evaluated at a single resolution", self.task.name());
        }
        if self.task.is_region() != self.dataset.yields_points() {
            bail!("dataset kind does not fit task {}", self.task.name());
        }
        if let DataSource::Synthetic { spec } = &self.dataset {
            spec.validate()?;
            if !self.task.is_region() && spec.params.resolution != self.resolutions[0] {
                bail!(
                    "walks are generated at resolution {} but the task runs at {}",
                    spec.params.resolution,
                    self.resolutions[0]
                );
            }
        }
        if self.embedders.is_empty() {
            bail!("at least one embedder is required");
        }
        let mut slugs: Vec<String> = self.embedders.iter().map(EmbedderConfig::slug).collect();
        slugs.sort();
        slugs.dedup();
        if slugs.len() != self.embedders.len() {
            bail!("embedders must be distinct");
        }
        match &self.features {
            None if self.embedders.iter().any(EmbedderConfig::needs_features) => {
                bail!("count embedders need a features dataset")
            }
            Some(f) if !f.dataset.yields_points() => bail!("features must be a point dataset"),
            _ => {}
        }
        self.split_config(self.resolutions[0]).validate()?;
        if self.split.manifest.is_none() && self.split.n_bins == 0 {
            bail!("n_bins must be >= 1");
        }
        let strat = self.split_config(self.resolutions[0]).strat_source;
        let region_strat = matches!(strat, StratSource::Target | StratSource::PointCount);
        if region_strat != self.task.is_region() {
            bail!("{strat:?} stratification does not apply to {}", self.task.name());
        }
        self.train_config(0).validate()?;
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            bail!("target_fraction must be in (0, 1)");
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            bail!("ks must be non-empty and positive");
        }
        if self.runs == 0 {
            bail!("runs must be >= 1");
        }
        if self.histogram_bins == 0 {
            bail!("histogram_bins must be >= 1");
        }
        if self.normalization.is_some() && self.task != Task::Cap {
            bail!("normalization applies to the intensity task only");
        }
        Ok(())
    }

    pub fn split_config(&self, r: u8) -> SplitConfig {
        SplitConfig {
            resolution: r,
            n_bins: self.split.n_bins,
            test_fraction: self.split.test_fraction,
            seed: self.seed,
            strat_source: self.split.strat_source.unwrap_or(self.task.default_strat()),
        }
    }

    /// Training config of repetition `run`; repetitions differ only in seed.
    pub fn train_config(&self, run: usize) -> TrainConfig {
        let mut t = self.train.clone().unwrap_or_else(|| self.task.default_train());
        t.seed = self.seed.wrapping_add(run as u64);
        t
    }

    pub fn normalization_scope(&self) -> NormalizationScope {
        self.normalization.unwrap_or(NormalizationScope::WholeDataset)
    }

    /// JSON without the output directory, so relocated reruns hash the same.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        serde_json::to_string_pretty(&c).expect("config serializes")
    }
}
