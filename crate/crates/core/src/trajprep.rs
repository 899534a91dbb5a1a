//! Hexification, gap interpolation and direction encoding of trajectories.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::{cell_of, CellId, DirectionLabel, GridError};
use crate::ingest::{HasId, Trajectory};

/// Largest grid gap bridged by interpolation.
pub const DEFAULT_MAX_GAP: u32 = 25;

/// Extra label used by the seven-class encoding for "stayed in the same cell".
pub const STAY_LABEL: u8 = 6;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("trajectory {0:?} has fewer than two distinct cells")]
    TooShort(String),
    #[error("trajectory {id:?} has a gap of {distance} cells (limit {limit})")]
    GapTooLarge { id: String, distance: u32, limit: u32 },
    #[error("cells at positions {0} and {} are not neighbors", .0 + 1)]
    NotContiguous(usize),
    #[error("label {0} is not a valid step label")]
    InvalidLabel(u8),
    #[error("times and cells differ in length for {0:?}")]
    TimeMismatch(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PrepError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HexTrajectory {
    pub id: String,
    pub resolution: u8,
    pub cells: Vec<CellId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub times: Option<Vec<f64>>,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl HasId for HexTrajectory {
    fn id(&self) -> &str {
        &self.id
    }
}

impl HexTrajectory {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn is_contiguous(&self) -> bool {
        is_contiguous(&self.cells)
    }

    /// Copy holding only `cells[range]` (and matching times).
    pub fn slice(&self, range: std::ops::Range<usize>) -> HexTrajectory {
        HexTrajectory {
            id: self.id.clone(),
            resolution: self.resolution,
            cells: self.cells[range.clone()].to_vec(),
            times: self.times.as_ref().map(|t| t[range].to_vec()),
            duration_s: self.duration_s,
            meta: self.meta.clone(),
        }
    }
}

/// Every consecutive pair at grid distance exactly 1.
pub fn is_contiguous(cells: &[CellId]) -> bool {
    cells.windows(2).all(|w| w[0] != w[1] && w[0].is_neighbor(w[1]))
}

/// Map samples to cells, collapsing runs of the same cell onto their first
/// timestamp. The duration is the raw time span of the input.
pub fn hexify(t: &Trajectory, r: u8) -> Result<HexTrajectory> {
    let mut cells: Vec<CellId> = Vec::with_capacity(t.samples.len());
    let mut times = Vec::with_capacity(t.samples.len());
    for s in &t.samples {
        let c = cell_of(s.point, r)?;
        if cells.last() != Some(&c) {
            cells.push(c);
            times.push(s.t);
        }
    }
    if cells.len() < 2 {
        return Err(PrepError::TooShort(t.id.clone()));
    }
    Ok(HexTrajectory {
        id: t.id.clone(),
        resolution: r,
        cells,
        times: Some(times),
        duration_s: t.duration_s(),
        meta: t.meta.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GapConfig {
    pub max_gap: u32,
    /// Split at oversize gaps instead of failing.
    pub split: bool,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self {
            max_gap: DEFAULT_MAX_GAP,
            split: true,
        }
    }
}

/// Splice shortest grid paths into gaps between non-adjacent consecutive cells.
///
/// Inserted cells get times linearly interpolated between the bracketing
/// samples. Gaps wider than `cfg.max_gap` split the trajectory into pieces
/// `id#0`, `id#1`, …; pieces shorter than two cells are discarded. The input
/// must already be free of consecutive duplicates.
pub fn interpolate_gaps(h: &HexTrajectory, cfg: GapConfig) -> Result<Vec<HexTrajectory>> {
    if let Some(t) = &h.times {
        if t.len() != h.cells.len() {
            return Err(PrepError::TimeMismatch(h.id.clone()));
        }
    }
    let mut pieces: Vec<(Vec<CellId>, Vec<f64>)> = Vec::new();
    let mut cells = Vec::with_capacity(h.cells.len());
    let mut times = Vec::with_capacity(h.cells.len());
    let time_at = |i: usize| h.times.as_ref().map_or(0.0, |t| t[i]);
    for (i, &c) in h.cells.iter().enumerate() {
        if i == 0 {
            cells.push(c);
            times.push(time_at(0));
            continue;
        }
        let prev = h.cells[i - 1];
        let d = prev.grid_distance(c)?;
        if d > cfg.max_gap {
            if !cfg.split {
                return Err(PrepError::GapTooLarge {
                    id: h.id.clone(),
                    distance: d,
                    limit: cfg.max_gap,
                });
            }
            pieces.push((std::mem::take(&mut cells), std::mem::take(&mut times)));
        } else if d > 1 {
            let path = prev.grid_path(c)?;
            let (t0, t1) = (time_at(i - 1), time_at(i));
            for (j, &mid) in path[1..path.len() - 1].iter().enumerate() {
                cells.push(mid);
                times.push(t0 + (t1 - t0) * (j + 1) as f64 / d as f64);
            }
        }
        cells.push(c);
        times.push(time_at(i));
    }
    pieces.push((cells, times));

    let total = h.cells.len().max(2) - 1;
    let n_pieces = pieces.len();
    let out = pieces
        .into_iter()
        .enumerate()
        .filter(|(_, (c, _))| c.len() >= 2)
        .map(|(k, (cells, times))| {
            let (id, duration_s) = if n_pieces == 1 {
                (h.id.clone(), h.duration_s)
            } else if h.times.is_some() {
                (format!("{}#{k}", h.id), times[times.len() - 1] - times[0])
            } else {
                let share = (cells.len() - 1) as f64 / total as f64;
                (format!("{}#{k}", h.id), h.duration_s * share)
            };
            HexTrajectory {
                id,
                resolution: h.resolution,
                cells,
                times: h.times.as_ref().map(|_| times),
                duration_s,
                meta: h.meta.clone(),
            }
        })
        .collect();
    Ok(out)
}

/// Direction label of every step; `cells` must be contiguous.
pub fn encode_directions(cells: &[CellId]) -> Result<Vec<DirectionLabel>> {
    cells
        .windows(2)
        .enumerate()
        .map(|(i, w)| match w[0].direction_to(w[1]) {
            Err(GridError::NotAdjacent(..)) => Err(PrepError::NotContiguous(i)),
            other => Ok(other?),
        })
        .collect()
}

/// Walk `labels` from `start`.
pub fn decode_directions(start: CellId, labels: &[DirectionLabel]) -> Result<Vec<CellId>> {
    let mut out = Vec::with_capacity(labels.len() + 1);
    out.push(start);
    let mut cur = start;
    for &d in labels {
        cur = cur.neighbor(d)?;
        out.push(cur);
    }
    Ok(out)
}

/// Seven-class encoding: repeated cells become [`STAY_LABEL`].
pub fn encode_with_stay(cells: &[CellId]) -> Result<Vec<u8>> {
    cells
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            if w[0] == w[1] {
                return Ok(STAY_LABEL);
            }
            match w[0].direction_to(w[1]) {
                Err(GridError::NotAdjacent(..)) => Err(PrepError::NotContiguous(i)),
                other => Ok(other?.value()),
            }
        })
        .collect()
}

pub fn decode_with_stay(start: CellId, labels: &[u8]) -> Result<Vec<CellId>> {
    let mut out = vec![start];
    let mut cur = start;
    for &l in labels {
        if l != STAY_LABEL {
            let d = DirectionLabel::new(l).map_err(|_| PrepError::InvalidLabel(l))?;
            cur = cur.neighbor(d)?;
        }
        out.push(cur);
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrepStats {
    pub input: usize,
    pub too_short: usize,
    /// Trajectories touching a pentagon or otherwise unencodable.
    pub rejected: usize,
    /// Extra pieces created by gap splitting.
    pub split_pieces: usize,
    pub output: usize,
}

/// Hexify, interpolate and validate a batch of trajectories, in parallel.
/// The output is ordered by id.
pub fn prepare(trajs: &[Trajectory], r: u8, gap: GapConfig) -> Result<(Vec<HexTrajectory>, PrepStats)> {
    let results: Vec<std::result::Result<Vec<HexTrajectory>, PrepError>> = trajs
        .par_iter()
        .map(|t| {
            let h = hexify(t, r)?;
            let pieces = interpolate_gaps(&h, gap)?;
            for p in &pieces {
                encode_directions(&p.cells)?;
            }
            Ok(pieces)
        })
        .collect();
    let mut stats = PrepStats {
        input: trajs.len(),
        ..PrepStats::default()
    };
    let mut out = Vec::new();
    for r in results {
        match r {
            Ok(pieces) => {
                stats.split_pieces += pieces.len().saturating_sub(1);
                out.extend(pieces);
            }
            Err(PrepError::TooShort(_)) => stats.too_short += 1,
            Err(e @ PrepError::GapTooLarge { .. }) if !gap.split => return Err(e),
            Err(e) => {
                log::warn!("rejecting trajectory: {e}");
                stats.rejected += 1;
            }
        }
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    stats.output = out.len();
    Ok((out, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedRecord {
    pub id: String,
    pub resolution: u8,
    pub cells: Vec<CellId>,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    pub duration_s: f64,
    pub labels: Vec<DirectionLabel>,
}

pub fn write_prepared_jsonl(trajs: &[HexTrajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        let rec = PreparedRecord {
            id: t.id.clone(),
            resolution: t.resolution,
            cells: t.cells.clone(),
            times: t.times.clone(),
            duration_s: t.duration_s,
            labels: encode_directions(&t.cells)?,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_prepared_jsonl(path: &Path) -> Result<Vec<HexTrajectory>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreparedRecord = serde_json::from_str(&line)?;
        out.push(HexTrajectory {
            id: rec.id,
            resolution: rec.resolution,
            cells: rec.cells,
            times: rec.times,
            duration_s: rec.duration_s,
            meta: BTreeMap::new(),
        });
    }
    Ok(out)
}
