//! Spatially disjoint, quantile-stratified train/test splits and X/Y
//! segmentation of trajectories.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::{CellId, GridError};
use crate::ingest::PointRecord;
use crate::regionize::{self, RegionDataset, RegionError};
use crate::trajprep::HexTrajectory;

pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
pub const DEFAULT_N_BINS: usize = 7;
pub const DEFAULT_TARGET_FRACTION: f64 = 0.15;

#[derive(Debug, Error)]
pub enum SplitError {
    #[error("no values to split")]
    EmptyInput,
    #[error("need at least 2 cells, got {0}")]
    TooFewCells(usize),
    #[error("need at least 2 trajectories, got {0}")]
    TooFewTrajectories(usize),
    #[error("invalid split config: {0}")]
    InvalidConfig(String),
    #[error("non-finite stratification value for {0:?}")]
    NonFinite(String),
    #[error("trajectory {0:?} is too short to segment")]
    TooShort(String),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SplitError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StratSource {
    Target,
    PointCount,
    Duration,
    Length,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub resolution: u8,
    #[serde(default = "default_bins")]
    pub n_bins: usize,
    #[serde(default = "default_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    pub strat_source: StratSource,
}

fn default_bins() -> usize {
    DEFAULT_N_BINS
}

fn default_fraction() -> f64 {
    DEFAULT_TEST_FRACTION
}

impl SplitConfig {
    pub fn new(resolution: u8, strat_source: StratSource) -> Self {
        Self {
            resolution,
            n_bins: DEFAULT_N_BINS,
            test_fraction: DEFAULT_TEST_FRACTION,
            seed: 0,
            strat_source,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 {
            return Err(SplitError::InvalidConfig("n_bins must be ≥ 1".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(SplitError::InvalidConfig(format!(
                "test_fraction {} outside (0, 1)",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: usize,
    pub size: usize,
    pub test: usize,
    pub achieved_fraction: f64,
    /// Single-member bucket, kept entirely in train.
    pub degenerate: bool,
}

/// Field order is part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub config: SplitConfig,
    pub bucket_report: Vec<BucketReport>,
}

impl SplitManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        let train: BTreeSet<&String> = m.train.iter().collect();
        if let Some(id) = m.test.iter().find(|id| train.contains(id)) {
            return Err(SplitError::InvalidConfig(format!("{id} listed in both splits")));
        }
        Ok(m)
    }

    pub fn train_cells(&self) -> Result<Vec<CellId>> {
        Ok(self.train.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>()?)
    }

    pub fn test_cells(&self) -> Result<Vec<CellId>> {
        Ok(self.test.iter().map(|s| s.parse()).collect::<std::result::Result<_, _>>()?)
    }

    pub fn degenerate_count(&self) -> usize {
        self.bucket_report.iter().filter(|b| b.degenerate).count()
    }
}

/// Linear-interpolation empirical quantile of sorted data.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Quantile bucket of each value. Boundaries sit at the empirical quantiles
/// `i/n`; a value equal to a boundary falls in the lower bucket, so bucket ids
/// need not be contiguous when values tie.
pub fn bucketize(values: &[f64], n: usize) -> Result<Vec<usize>> {
    if values.is_empty() {
        return Err(SplitError::EmptyInput);
    }
    if n == 0 {
        return Err(SplitError::InvalidConfig("n_bins must be ≥ 1".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SplitError::NonFinite(format!("index {i}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let bounds: Vec<f64> = (1..n).map(|i| quantile(&sorted, i as f64 / n as f64)).collect();
    Ok(values
        .iter()
        .map(|v| bounds.partition_point(|b| b < v))
        .collect())
}

/// Round half to even.
fn round_half_even(x: f64) -> usize {
    let r = x.round();
    let r = if (x - x.trunc()).abs() == 0.5 && r % 2.0 != 0.0 {
        r - 1.0
    } else {
        r
    };
    r.max(0.0) as usize
}

/// Largest-remainder apportionment of `total` test slots over buckets with
/// quotas `fraction · size`. Every bucket receives ⌊quota⌋ or ⌈quota⌉.
fn apportion(sizes: &[usize], fraction: f64, total: usize) -> Vec<usize> {
    let quotas: Vec<f64> = sizes.iter().map(|&s| s as f64 * fraction).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        if counts[i] < sizes[i] {
            counts[i] += 1;
        }
    }
    counts
}

/// Stratified split of ids by their stratification value.
pub fn split_by_values(ids: &[String], values: &[f64], cfg: &SplitConfig) -> Result<SplitManifest> {
    cfg.validate()?;
    if ids.len() != values.len() {
        return Err(SplitError::InvalidConfig("ids and values differ in length".into()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(SplitError::NonFinite(ids[i].clone()));
    }
    let buckets = bucketize(values, cfg.n_bins)?;
    let mut members: BTreeMap<usize, Vec<&String>> = BTreeMap::new();
    for (id, b) in ids.iter().zip(&buckets) {
        members.entry(*b).or_default().push(id);
    }
    let live: Vec<usize> = members
        .iter()
        .filter(|(_, m)| m.len() >= 2)
        .map(|(&b, _)| b)
        .collect();
    let live_sizes: Vec<usize> = live.iter().map(|b| members[b].len()).collect();
    let total = round_half_even(cfg.test_fraction * live_sizes.iter().sum::<usize>() as f64);
    let counts: BTreeMap<usize, usize> = live
        .iter()
        .copied()
        .zip(apportion(&live_sizes, cfg.test_fraction, total))
        .collect();

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut report = Vec::new();
    for (b, mut m) in members {
        m.sort();
        let n_test = counts.get(&b).copied().unwrap_or(0);
        let degenerate = m.len() < 2;
        if degenerate {
            log::warn!("bucket {b} has a single member {:?}; kept in train", m[0]);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(b as u64);
        m.shuffle(&mut rng);
        test.extend(m[..n_test].iter().map(|s| s.to_string()));
        train.extend(m[n_test..].iter().map(|s| s.to_string()));
        report.push(BucketReport {
            bucket: b,
            size: m.len(),
            test: n_test,
            achieved_fraction: n_test as f64 / m.len() as f64,
            degenerate,
        });
    }
    train.sort();
    test.sort();
    Ok(SplitManifest {
        train,
        test,
        config: *cfg,
        bucket_report: report,
    })
}

/// Split the cells of a region dataset, stratifying by target or support.
pub fn split_regions(ds: &RegionDataset, cfg: &SplitConfig) -> Result<SplitManifest> {
    if ds.len() < 2 {
        return Err(SplitError::TooFewCells(ds.len()));
    }
    if ds.resolution != cfg.resolution {
        return Err(SplitError::InvalidConfig(format!(
            "dataset resolution {} differs from split resolution {}",
            ds.resolution, cfg.resolution
        )));
    }
    let values: Vec<f64> = match cfg.strat_source {
        StratSource::Target => ds.targets(),
        StratSource::PointCount => ds.rows.values().map(|r| r.support as f64).collect(),
        other => {
            return Err(SplitError::InvalidConfig(format!(
                "{other:?} stratification applies to trajectories"
            )))
        }
    };
    let ids: Vec<String> = ds.cells().iter().map(CellId::to_string).collect();
    split_by_values(&ids, &values, cfg)
}

/// Regionize points at `cfg.resolution`, then split their cells.
pub fn split_points(points: &[PointRecord], cfg: &SplitConfig) -> Result<SplitManifest> {
    let ds = match cfg.strat_source {
        StratSource::Target => regionize::aggregate_mean(points, cfg.resolution)?,
        _ => regionize::aggregate_intensity(points, cfg.resolution)?,
    };
    split_regions(&ds, cfg)
}

/// Partition points by the side their cell was assigned to. Points whose cell
/// is on neither side are returned in the third list.
pub fn assign_points<'a>(
    points: &'a [PointRecord],
    manifest: &SplitManifest,
) -> Result<(Vec<&'a PointRecord>, Vec<&'a PointRecord>, Vec<&'a PointRecord>)> {
    let train: BTreeSet<CellId> = manifest.train_cells()?.into_iter().collect();
    let test: BTreeSet<CellId> = manifest.test_cells()?.into_iter().collect();
    let mut out = (Vec::new(), Vec::new(), Vec::new());
    for p in points {
        let c = p.point.cell(manifest.config.resolution)?;
        if train.contains(&c) {
            out.0.push(p);
        } else if test.contains(&c) {
            out.1.push(p);
        } else {
            out.2.push(p);
        }
    }
    Ok(out)
}

/// Split whole trajectories, stratified by duration or length.
pub fn split_trajectories(trajs: &[HexTrajectory], cfg: &SplitConfig) -> Result<SplitManifest> {
    if trajs.len() < 2 {
        return Err(SplitError::TooFewTrajectories(trajs.len()));
    }
    let values: Vec<f64> = match cfg.strat_source {
        StratSource::Duration => trajs.iter().map(|t| t.duration_s).collect(),
        StratSource::Length => trajs.iter().map(|t| t.cells.len() as f64).collect(),
        other => {
            return Err(SplitError::InvalidConfig(format!(
                "{other:?} stratification applies to regions"
            )))
        }
    };
    let ids: Vec<String> = trajs.iter().map(|t| t.id.clone()).collect();
    split_by_values(&ids, &values, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentedTrajectory {
    pub id: String,
    pub x: HexTrajectory,
    pub y: Vec<CellId>,
    pub target_fraction: f64,
}

impl SegmentedTrajectory {
    /// The full cell path, X followed by Y.
    pub fn full_path(&self) -> Vec<CellId> {
        let mut v = self.x.cells.clone();
        v.extend_from_slice(&self.y);
        v
    }
}

/// Length of the target suffix: `max(1, ⌊fraction · len⌋)`, leaving X non-empty.
pub fn target_len(len: usize, fraction: f64) -> usize {
    let y = (fraction * len as f64 + 1e-9).floor() as usize;
    y.max(1).min(len.saturating_sub(1))
}

pub fn segment_xy(t: &HexTrajectory, target_fraction: f64) -> Result<SegmentedTrajectory> {
    if t.cells.len() < 2 {
        return Err(SplitError::TooShort(t.id.clone()));
    }
    if !(target_fraction > 0.0 && target_fraction < 1.0) {
        return Err(SplitError::InvalidConfig(format!(
            "target fraction {target_fraction} outside (0, 1)"
        )));
    }
    let n = t.cells.len();
    let ny = target_len(n, target_fraction);
    Ok(SegmentedTrajectory {
        id: t.id.clone(),
        x: t.slice(0..n - ny),
        y: t.cells[n - ny..].to_vec(),
        target_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i:04}")).collect()
    }

    #[test]
    fn median_split() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(bucketize(&v, 2).unwrap(), [0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert!(bucketize(&v, 1).unwrap().iter().all(|&b| b == 0));
        assert!(bucketize(&[5.0; 4], 4).unwrap().iter().all(|&b| b == 0));
        assert!(matches!(bucketize(&[], 2), Err(SplitError::EmptyInput)));
    }

    #[test]
    fn quartiles_contribute_proportionally() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut cfg = SplitConfig::new(9, StratSource::Length);
        cfg.n_bins = 4;
        cfg.test_fraction = 0.3;
        let m = split_by_values(&ids(100), &v, &cfg).unwrap();
        assert_eq!(m.bucket_report.len(), 4);
        for b in &m.bucket_report {
            assert_eq!(b.size, 25);
            assert!((b.test as f64 - 7.5).abs() <= 1.0);
        }
        assert_eq!(m.test.len(), 30);
    }

    #[test]
    fn unstratified_proportion_and_seeds() {
        let v = vec![1.0; 100];
        let mut cfg = SplitConfig::new(9, StratSource::Target);
        cfg.n_bins = 1;
        let a = split_by_values(&ids(100), &v, &cfg).unwrap();
        assert_eq!(a.test.len(), 20);
        assert_eq!(a.train.len(), 80);
        assert!(a.test.iter().all(|t| !a.train.contains(t)));
        cfg.seed = 99;
        let b = split_by_values(&ids(100), &v, &cfg).unwrap();
        assert_eq!(b.test.len(), 20);
        assert_ne!(a.test, b.test);
    }

    #[test]
    fn identical_lengths() {
        let v = vec![12.0; 10];
        let mut cfg = SplitConfig::new(9, StratSource::Length);
        cfg.test_fraction = 0.3;
        let m = split_by_values(&ids(10), &v, &cfg).unwrap();
        assert_eq!(m.test.len(), 3);
    }

    #[test]
    fn input_order_does_not_matter() {
        let v: Vec<f64> = (0..50).map(|i| ((i * 37) % 50) as f64).collect();
        let cfg = SplitConfig::new(9, StratSource::Target);
        let a = split_by_values(&ids(50), &v, &cfg).unwrap();
        let mut pairs: Vec<(String, f64)> = ids(50).into_iter().zip(v).collect();
        pairs.reverse();
        let (rid, rv): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let b = split_by_values(&rid, &rv, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn degenerate_bucket_goes_to_train() {
        let v = vec![1.0, 1.0, 1.0, 100.0];
        let mut cfg = SplitConfig::new(9, StratSource::Target);
        cfg.n_bins = 4;
        cfg.test_fraction = 0.5;
        let m = split_by_values(&ids(4), &v, &cfg).unwrap();
        assert_eq!(m.degenerate_count(), 1);
        assert!(m.train.contains(&"id0003".to_string()));
        assert_eq!(m.train.len() + m.test.len(), 4);
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(2.4), 2);
        assert_eq!(round_half_even(2.6), 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = SplitConfig::new(9, StratSource::Target);
        cfg.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
        cfg.test_fraction = 0.2;
        cfg.n_bins = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn manifest_json_field_order() {
        let cfg = SplitConfig::new(9, StratSource::Target);
        let m = split_by_values(&ids(5), &[1.0, 2.0, 3.0, 4.0, 5.0], &cfg).unwrap();
        let json = m.to_json().unwrap();
        let pos = |k: &str| json.find(&format!("\"{k}\"")).unwrap();
        assert!(pos("train") < pos("test") && pos("test") < pos("config") && pos("config") < pos("bucket_report"));
        assert_eq!(SplitManifest::from_json(&json).unwrap(), m);
    }

    fn traj(n: usize) -> HexTrajectory {
        let start: CellId = "8928308280fffff".parse().unwrap();
        let d = crate::hexgrid::DirectionLabel::new(1).unwrap();
        let cells = crate::trajprep::decode_directions(start, &vec![d; n - 1]).unwrap();
        HexTrajectory {
            id: format!("len{n}"),
            resolution: 9,
            cells,
            times: None,
            duration_s: n as f64,
            meta: Default::default(),
        }
    }

    #[test]
    fn xy_segmentation() {
        let s = segment_xy(&traj(20), 0.15).unwrap();
        assert_eq!((s.x.len(), s.y.len()), (17, 3));
        assert_eq!(s.full_path(), traj(20).cells);
        let s = segment_xy(&traj(2), 0.15).unwrap();
        assert_eq!((s.x.len(), s.y.len()), (1, 1));
        assert_eq!(segment_xy(&traj(100), 0.15).unwrap().y.len(), 15);
        let mut short = traj(2);
        short.cells.pop();
        assert!(matches!(segment_xy(&short, 0.15), Err(SplitError::TooShort(_))));
    }
}
