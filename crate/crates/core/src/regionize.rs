//! Per-cell aggregation of point records into region targets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::{cell_of, CellId, GridError};
use crate::ingest::PointRecord;

pub const MIN_RESOLUTION: u8 = 6;
pub const MAX_RESOLUTION: u8 = 11;

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("resolution {0} outside the supported range 6..=11")]
    InvalidResolution(u8),
    #[error("point {0:?} has no finite target")]
    MissingTarget(String),
    #[error("no input points")]
    EmptyInput,
    #[error("no resolutions requested")]
    NoResolutions,
    #[error("normalization needs at least one training cell with observations")]
    EmptyTrainSet,
    #[error("malformed region file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RegionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    MeanValue,
    Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    WholeDataset,
    TrainOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    pub max_count: u64,
    pub scope: NormalizationScope,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub target: f64,
    /// Number of points aggregated into the cell; 0 only for zero-filled rows.
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionDataset {
    pub resolution: u8,
    pub rows: BTreeMap<CellId, RegionRow>,
    pub target_kind: TargetKind,
    pub normalization: Option<Normalization>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    resolution: u8,
    target_kind: TargetKind,
    normalization: Option<Normalization>,
    rows: usize,
}

fn check_resolution(r: u8) -> Result<()> {
    if (MIN_RESOLUTION..=MAX_RESOLUTION).contains(&r) {
        Ok(())
    } else {
        Err(RegionError::InvalidResolution(r))
    }
}

/// Cell of every point, computed in parallel but returned in input order.
fn assign_cells(points: &[PointRecord], r: u8) -> Result<Vec<CellId>> {
    Ok(points
        .par_iter()
        .map(|p| cell_of(p.point, r))
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

/// Per-cell point counts.
pub fn cell_counts(points: &[PointRecord], r: u8) -> Result<BTreeMap<CellId, u64>> {
    let mut counts = BTreeMap::new();
    for c in assign_cells(points, r)? {
        *counts.entry(c).or_insert(0) += 1;
    }
    Ok(counts)
}

/// Mean point target per cell.
pub fn aggregate_mean(points: &[PointRecord], r: u8) -> Result<RegionDataset> {
    check_resolution(r)?;
    if points.is_empty() {
        return Err(RegionError::EmptyInput);
    }
    let targets = points
        .iter()
        .map(|p| match p.target {
            Some(t) if t.is_finite() => Ok(t),
            _ => Err(RegionError::MissingTarget(p.id.clone())),
        })
        .collect::<Result<Vec<f64>>>()?;
    // (sum, count, min, max)
    let mut acc: BTreeMap<CellId, (f64, u64, f64, f64)> = BTreeMap::new();
    for (c, t) in assign_cells(points, r)?.into_iter().zip(targets) {
        let e = acc.entry(c).or_insert((0.0, 0, f64::INFINITY, f64::NEG_INFINITY));
        e.0 += t;
        e.1 += 1;
        e.2 = e.2.min(t);
        e.3 = e.3.max(t);
    }
    let rows = acc
        .into_iter()
        .map(|(c, (sum, n, lo, hi))| {
            // Rounding can push the mean a hair outside the observed range.
            let target = (sum / n as f64).clamp(lo, hi);
            (c, RegionRow { target, support: n })
        })
        .collect();
    Ok(RegionDataset {
        resolution: r,
        rows,
        target_kind: TargetKind::MeanValue,
        normalization: None,
    })
}

/// Per-cell point count divided by the largest per-cell count.
pub fn aggregate_intensity(points: &[PointRecord], r: u8) -> Result<RegionDataset> {
    check_resolution(r)?;
    if points.is_empty() {
        return Err(RegionError::EmptyInput);
    }
    let counts = cell_counts(points, r)?;
    let max_count = counts.values().copied().max().unwrap_or(1);
    let rows = counts
        .into_iter()
        .map(|(c, n)| {
            (
                c,
                RegionRow {
                    target: n as f64 / max_count as f64,
                    support: n,
                },
            )
        })
        .collect();
    Ok(RegionDataset {
        resolution: r,
        rows,
        target_kind: TargetKind::Intensity,
        normalization: Some(Normalization {
            max_count,
            scope: NormalizationScope::WholeDataset,
        }),
    })
}

pub fn aggregate(points: &[PointRecord], r: u8, kind: TargetKind) -> Result<RegionDataset> {
    match kind {
        TargetKind::MeanValue => aggregate_mean(points, r),
        TargetKind::Intensity => aggregate_intensity(points, r),
    }
}

/// One dataset per resolution, each normalized independently.
pub fn multi_resolution(
    points: &[PointRecord],
    resolutions: &[u8],
    kind: TargetKind,
) -> Result<BTreeMap<u8, RegionDataset>> {
    if resolutions.is_empty() {
        return Err(RegionError::NoResolutions);
    }
    resolutions
        .iter()
        .map(|&r| Ok((r, aggregate(points, r, kind)?)))
        .collect()
}

impl RegionDataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn cells(&self) -> Vec<CellId> {
        self.rows.keys().copied().collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.rows.values().map(|r| r.target).collect()
    }

    pub fn target(&self, c: CellId) -> Option<f64> {
        self.rows.get(&c).map(|r| r.target)
    }

    pub fn total_support(&self) -> u64 {
        self.rows.values().map(|r| r.support).sum()
    }

    /// Re-derive intensities from the maximum count over `train` cells only.
    /// Test cells denser than every training cell are clipped to 1.
    pub fn renormalize_train_only(&self, train: &[CellId]) -> Result<RegionDataset> {
        let max_count = train
            .iter()
            .filter_map(|c| self.rows.get(c))
            .map(|r| r.support)
            .max()
            .filter(|&m| m > 0)
            .ok_or(RegionError::EmptyTrainSet)?;
        let rows = self
            .rows
            .iter()
            .map(|(&c, r)| {
                let target = (r.support as f64 / max_count as f64).min(1.0);
                (c, RegionRow { target, support: r.support })
            })
            .collect();
        Ok(RegionDataset {
            resolution: self.resolution,
            rows,
            target_kind: TargetKind::Intensity,
            normalization: Some(Normalization {
                max_count,
                scope: NormalizationScope::TrainOnly,
            }),
        })
    }

    /// Add zero-target, zero-support rows for study-area cells with no points.
    pub fn zero_filled(&self, study_area: &[CellId]) -> RegionDataset {
        let mut out = self.clone();
        for &c in study_area {
            out.rows.entry(c).or_insert(RegionRow {
                target: 0.0,
                support: 0,
            });
        }
        out
    }

    /// Write `cell,target,support` CSV plus a sidecar JSON next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["cell", "target", "support"])?;
        for (c, r) in &self.rows {
            w.write_record([c.to_string(), format_sig10(r.target), r.support.to_string()])?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            resolution: self.resolution,
            target_kind: self.target_kind,
            normalization: self.normalization,
            rows: self.rows.len(),
        };
        std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&sidecar)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RegionDataset> {
        let sidecar: Sidecar = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let bad = || RegionError::Malformed(format!("{rec:?}"));
            let cell: CellId = rec.get(0).ok_or_else(bad)?.parse()?;
            let target: f64 = rec.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            let support: u64 = rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?;
            if cell.resolution() != sidecar.resolution {
                return Err(bad());
            }
            rows.insert(cell, RegionRow { target, support });
        }
        if rows.len() != sidecar.rows {
            return Err(RegionError::Malformed(format!(
                "sidecar lists {} rows, csv has {}",
                sidecar.rows,
                rows.len()
            )));
        }
        Ok(RegionDataset {
            resolution: sidecar.resolution,
            rows,
            target_kind: sidecar.target_kind,
            normalization: sidecar.normalization,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Shortest decimal representation of `v` rounded to 10 significant digits.
pub fn format_sig10(v: f64) -> String {
    let rounded: f64 = format!("{v:.9e}").parse().unwrap_or(v);
    rounded.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hexgrid::GeoPoint;

    fn pt(id: &str, lat: f64, lon: f64, target: Option<f64>) -> PointRecord {
        let mut p = PointRecord::new(id, GeoPoint::new(lat, lon).unwrap());
        p.target = target;
        p
    }

    #[test]
    fn mean_per_cell() {
        let pts = vec![
            pt("a", 47.6, -122.3, Some(100.0)),
            pt("b", 47.6, -122.3, Some(300.0)),
            pt("c", 47.7, -122.2, Some(42.0)),
        ];
        let ds = aggregate_mean(&pts, 9).unwrap();
        assert_eq!(ds.len(), 2);
        let c = cell_of(pts[0].point, 9).unwrap();
        assert_eq!(ds.rows[&c], RegionRow { target: 200.0, support: 2 });
        assert_eq!(ds.target(cell_of(pts[2].point, 9).unwrap()), Some(42.0));
        assert_eq!(ds.total_support(), 3);
    }

    #[test]
    fn mean_errors() {
        assert!(matches!(aggregate_mean(&[], 9), Err(RegionError::EmptyInput)));
        let pts = vec![pt("a", 47.6, -122.3, None)];
        assert!(matches!(aggregate_mean(&pts, 9), Err(RegionError::MissingTarget(_))));
        assert!(matches!(aggregate_mean(&pts, 5), Err(RegionError::InvalidResolution(5))));
    }

    #[test]
    fn mean_stays_within_observed_range() {
        let pts: Vec<_> = (0..3).map(|i| pt(&i.to_string(), 47.6, -122.3, Some(0.1))).collect();
        let ds = aggregate_mean(&pts, 9).unwrap();
        assert_eq!(ds.targets(), vec![0.1]);
    }

    #[test]
    fn intensity_max_normalized() {
        let a = (47.60, -122.30);
        let b = (47.65, -122.25);
        let c = (47.70, -122.20);
        let mut pts = Vec::new();
        for (i, (lat, lon)) in [a, a, a, a, b, b, c].into_iter().enumerate() {
            pts.push(pt(&i.to_string(), lat, lon, None));
        }
        let ds = aggregate_intensity(&pts, 9).unwrap();
        let t = |p: (f64, f64)| ds.target(cell_of(GeoPoint::new(p.0, p.1).unwrap(), 9).unwrap()).unwrap();
        assert_eq!((t(a), t(b), t(c)), (1.0, 0.5, 0.25));
        assert_eq!(ds.normalization.unwrap().max_count, 4);

        let train = vec![cell_of(GeoPoint::new(b.0, b.1).unwrap(), 9).unwrap()];
        let renorm = ds.renormalize_train_only(&train).unwrap();
        assert_eq!(renorm.normalization.unwrap().scope, NormalizationScope::TrainOnly);
        assert_eq!(renorm.targets().iter().cloned().fold(0.0, f64::max), 1.0);
        assert_eq!(
            renorm.target(cell_of(GeoPoint::new(c.0, c.1).unwrap(), 9).unwrap()),
            Some(0.5)
        );
    }

    #[test]
    fn single_cell_intensity_is_one() {
        let ds = aggregate_intensity(&[pt("a", 1.0, 1.0, None)], 8).unwrap();
        assert_eq!(ds.targets(), vec![1.0]);
    }

    #[test]
    fn multi_resolution_matches_direct_call() {
        let pts = vec![pt("a", 47.6, -122.3, Some(1.0)), pt("b", 47.61, -122.31, Some(3.0))];
        let m = multi_resolution(&pts, &[9], TargetKind::MeanValue).unwrap();
        assert_eq!(m[&9], aggregate_mean(&pts, 9).unwrap());
        assert!(multi_resolution(&pts, &[], TargetKind::MeanValue).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            pt("a", 47.6, -122.3, Some(1.0 / 3.0)),
            pt("b", 47.7, -122.2, Some(123456.789)),
        ];
        let ds = aggregate_mean(&pts, 9).unwrap();
        let path = dir.path().join("ds.csv");
        ds.write(&path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("cell,target,support\n"));
        assert!(body.contains(",0.3333333333,1"));
        let back = RegionDataset::read(&path).unwrap();
        assert_eq!(back.cells(), ds.cells());
        assert_eq!(back.target_kind, TargetKind::MeanValue);
    }

    #[test]
    fn zero_fill_adds_missing_cells() {
        let ds = aggregate_intensity(&[pt("a", 1.0, 1.0, None)], 9).unwrap();
        let c = ds.cells()[0];
        let filled = ds.zero_filled(&c.disk(1));
        assert_eq!(filled.len(), 7);
        assert_eq!(filled.total_support(), 1);
    }

    #[test]
    fn sig10_formatting() {
        assert_eq!(format_sig10(200.0), "200");
        assert_eq!(format_sig10(0.1 + 0.2), "0.3");
        assert_eq!(format_sig10(1234567.891234), "1234567.891");
    }
}
