//! Loaders for point CSVs, Porto taxi polylines, Geolife PLT directories and
//! raw trajectory JSON Lines, plus ID-list split manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::GeoPoint;

/// Porto trips are sampled every 15 seconds.
pub const PORTO_INTERVAL_S: f64 = 15.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("header mismatch: {0}")]
    HeaderMismatch(String),
    #[error("no valid records in {0}")]
    EmptyDataset(PathBuf),
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("malformed polyline: {0}")]
    MalformedPolyline(String),
    #[error("malformed PLT file {path}: line {line}")]
    MalformedPlt { path: PathBuf, line: usize },
    #[error("{0} unknown ids in manifest, e.g. {1:?}")]
    UnknownIds(usize, String),
    #[error("ids present in both train and test, e.g. {0:?}")]
    OverlappingIds(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("invalid trajectory {id}: {reason}")]
    InvalidTrajectory { id: String, reason: &'static str },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, IngestError>;

/// Anything keyed by a dataset-unique string id.
pub trait HasId {
    fn id(&self) -> &str;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Text(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: String,
    pub point: GeoPoint,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub features: BTreeMap<String, FeatureValue>,
}

impl PointRecord {
    pub fn new(id: impl Into<String>, point: GeoPoint) -> Self {
        Self {
            id: id.into(),
            point,
            timestamp: None,
            target: None,
            features: BTreeMap::new(),
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = Some(target);
        self
    }
}

impl HasId for PointRecord {
    fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub point: GeoPoint,
    /// UTC seconds.
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Trajectory {
    /// Validates length (≥ 2), finite times and time order.
    pub fn new(id: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let t = Self {
            id: id.into(),
            samples,
            meta: BTreeMap::new(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason| IngestError::InvalidTrajectory {
            id: self.id.clone(),
            reason,
        };
        if self.samples.len() < 2 {
            return Err(fail("fewer than 2 samples"));
        }
        if self.samples.iter().any(|s| !s.t.is_finite()) {
            return Err(fail("non-finite timestamp"));
        }
        if self.samples.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(fail("timestamps decrease"));
        }
        Ok(())
    }

    pub fn duration_s(&self) -> f64 {
        match (self.samples.first(), self.samples.last()) {
            (Some(a), Some(b)) => b.t - a.t,
            _ => 0.0,
        }
    }
}

impl HasId for Trajectory {
    fn id(&self) -> &str {
        &self.id
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    PointCsv,
    PortoPolylineCsv,
    GeolifePltDir,
    /// One raw trajectory per line, as written by [`write_trajectories_jsonl`].
    TrajectoryJsonl,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BBox {
    /// Greater Beijing, the default filter for Geolife.
    pub const BEIJING: BBox = BBox {
        min_lat: 39.4,
        max_lat: 41.1,
        min_lon: 115.4,
        max_lon: 117.6,
    };

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat()) && (self.min_lon..=self.max_lon).contains(&p.lon())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawDatasetDescriptor {
    pub format: DatasetFormat,
    pub path: PathBuf,
    /// Role → column name. Roles: `id`, `lat`, `lon`, `target`, `timestamp`
    /// for point CSVs; `id`, `polyline`, `start` for Porto.
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
}

impl RawDatasetDescriptor {
    pub fn new(format: DatasetFormat, path: impl Into<PathBuf>) -> Self {
        Self {
            format,
            path: path.into(),
            columns: BTreeMap::new(),
            bbox: None,
        }
    }

    pub fn bind(mut self, role: &str, column: &str) -> Self {
        self.columns.insert(role.to_string(), column.to_string());
        self
    }

    fn column<'a>(&'a self, role: &str, default: &'a str) -> &'a str {
        self.columns.get(role).map_or(default, String::as_str)
    }
}

/// Parsed records plus drop accounting: `input_rows = items.len() + dropped`.
#[derive(Clone, Debug, PartialEq)]
pub struct Loaded<T> {
    pub items: Vec<T>,
    pub input_rows: usize,
    pub dropped: usize,
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
        _ => IngestError::Io(e),
    })
}

fn header_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| IngestError::HeaderMismatch(format!("missing column {name:?}")))
}

/// Seconds since the epoch from an integer/float or a `YYYY-MM-DD HH:MM:SS` /
/// RFC 3339 string.
pub fn parse_timestamp(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then_some(v);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp() as f64);
    }
    NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
        .ok()
        .map(|dt| dt.and_utc().timestamp() as f64)
}

fn check_unique<T: HasId>(items: &[T]) -> Result<()> {
    for w in items.windows(2) {
        if w[0].id() == w[1].id() {
            return Err(IngestError::DuplicateId(w[0].id().to_string()));
        }
    }
    Ok(())
}

/// Load a point CSV. Rows with unparseable coordinates, a missing id, or an
/// unparseable target (when bound) are dropped and counted.
pub fn load_points(desc: &RawDatasetDescriptor) -> Result<Loaded<PointRecord>> {
    let mut reader = csv::Reader::from_reader(open(&desc.path)?);
    let headers = reader.headers()?.clone();
    let id_col = header_index(&headers, desc.column("id", "id"))?;
    let lat_col = header_index(&headers, desc.column("lat", "lat"))?;
    let lon_col = header_index(&headers, desc.column("lon", "lon"))?;
    let target_col = desc
        .columns
        .get("target")
        .map(|c| header_index(&headers, c))
        .transpose()?;
    let time_col = desc
        .columns
        .get("timestamp")
        .map(|c| header_index(&headers, c))
        .transpose()?;
    let bound: BTreeSet<usize> = [Some(id_col), Some(lat_col), Some(lon_col), target_col, time_col]
        .into_iter()
        .flatten()
        .collect();

    let mut items = Vec::new();
    let mut input_rows = 0;
    for row in reader.records() {
        input_rows += 1;
        let Ok(row) = row else { continue };
        let parse = |i: usize| row.get(i).and_then(|v| v.trim().parse::<f64>().ok());
        let id = row.get(id_col).unwrap_or("").trim();
        let point = match (parse(lat_col), parse(lon_col)) {
            (Some(lat), Some(lon)) => GeoPoint::new(lat, lon).ok(),
            _ => None,
        };
        let (Some(point), false) = (point, id.is_empty()) else {
            continue;
        };
        let target = match target_col {
            Some(c) => match parse(c) {
                Some(v) if v.is_finite() => Some(v),
                _ => continue,
            },
            None => None,
        };
        let timestamp = match time_col {
            Some(c) => match row.get(c).and_then(parse_timestamp) {
                Some(t) => Some(t),
                None => continue,
            },
            None => None,
        };
        let features = headers
            .iter()
            .enumerate()
            .filter(|(i, _)| !bound.contains(i))
            .filter_map(|(i, name)| {
                let raw = row.get(i)?.trim();
                if raw.is_empty() {
                    return None;
                }
                let value = match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => FeatureValue::Number(v),
                    _ => FeatureValue::Text(raw.to_string()),
                };
                Some((name.to_string(), value))
            })
            .collect();
        items.push(PointRecord {
            id: id.to_string(),
            point,
            timestamp,
            target,
            features,
        });
    }
    if items.is_empty() {
        return Err(IngestError::EmptyDataset(desc.path.clone()));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    check_unique(&items)?;
    let dropped = input_rows - items.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} of {input_rows} rows", desc.path.display());
    }
    Ok(Loaded {
        items,
        input_rows,
        dropped,
    })
}

/// Parse a `[[lon, lat], ...]` polyline into points (lat first).
pub fn parse_polyline(s: &str) -> Result<Vec<GeoPoint>> {
    let pairs: Vec<[f64; 2]> =
        serde_json::from_str(s).map_err(|_| IngestError::MalformedPolyline(truncate(s)))?;
    pairs
        .into_iter()
        .map(|[lon, lat]| GeoPoint::new(lat, lon).map_err(|_| IngestError::MalformedPolyline(truncate(s))))
        .collect()
}

fn truncate(s: &str) -> String {
    s.chars().take(40).collect()
}

/// Load Porto taxi trips. Per-point times are `start + 15·i`. Rows with a
/// malformed polyline, fewer than two points, or points outside the optional
/// bounding box are dropped and counted.
pub fn load_porto_trips(desc: &RawDatasetDescriptor) -> Result<Loaded<Trajectory>> {
    let mut reader = csv::Reader::from_reader(open(&desc.path)?);
    let headers = reader.headers()?.clone();
    let id_col = header_index(&headers, desc.column("id", "TRIP_ID"))?;
    let poly_col = header_index(&headers, desc.column("polyline", "POLYLINE"))?;
    let start_col = header_index(&headers, desc.column("start", "TIMESTAMP"))?;
    let mut items = Vec::new();
    let mut input_rows = 0;
    for row in reader.records() {
        input_rows += 1;
        let Ok(row) = row else { continue };
        let id = row.get(id_col).unwrap_or("").trim();
        let Some(start) = row.get(start_col).and_then(parse_timestamp) else {
            continue;
        };
        let Ok(points) = parse_polyline(row.get(poly_col).unwrap_or("")) else {
            continue;
        };
        if id.is_empty() || points.len() < 2 {
            continue;
        }
        if let Some(b) = desc.bbox {
            if !points.iter().all(|&p| b.contains(p)) {
                continue;
            }
        }
        let samples = points
            .into_iter()
            .enumerate()
            .map(|(i, point)| Sample {
                point,
                t: start + PORTO_INTERVAL_S * i as f64,
            })
            .collect();
        items.push(Trajectory {
            id: id.to_string(),
            samples,
            meta: BTreeMap::new(),
        });
    }
    finish_trajectories(desc, items, input_rows)
}

fn finish_trajectories(
    desc: &RawDatasetDescriptor,
    mut items: Vec<Trajectory>,
    input_rows: usize,
) -> Result<Loaded<Trajectory>> {
    if items.is_empty() {
        return Err(IngestError::EmptyDataset(desc.path.clone()));
    }
    items.sort_by(|a, b| a.id.cmp(&b.id));
    check_unique(&items)?;
    let dropped = input_rows - items.len();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} of {input_rows} trajectories", desc.path.display());
    }
    Ok(Loaded {
        items,
        input_rows,
        dropped,
    })
}

const PLT_HEADER_LINES: usize = 6;

/// Parse one PLT file; points outside `bbox` are skipped, as are samples
/// whose timestamp goes backwards.
pub fn parse_plt(path: &Path, bbox: Option<BBox>) -> Result<Vec<Sample>> {
    let reader = BufReader::new(open(path)?);
    let mut samples: Vec<Sample> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i < PLT_HEADER_LINES || line.trim().is_empty() {
            continue;
        }
        let malformed = || IngestError::MalformedPlt {
            path: path.to_path_buf(),
            line: i + 1,
        };
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() < 7 {
            return Err(malformed());
        }
        let lat: f64 = fields[0].trim().parse().map_err(|_| malformed())?;
        let lon: f64 = fields[1].trim().parse().map_err(|_| malformed())?;
        let point = GeoPoint::new(lat, lon).map_err(|_| malformed())?;
        let dt = NaiveDateTime::parse_from_str(
            &format!("{} {}", fields[5].trim(), fields[6].trim()),
            "%Y-%m-%d %H:%M:%S",
        )
        .map_err(|_| malformed())?;
        if bbox.is_some_and(|b| !b.contains(point)) {
            continue;
        }
        let t = dt.and_utc().timestamp() as f64;
        if samples.last().is_some_and(|s| t < s.t) {
            continue;
        }
        samples.push(Sample { point, t });
    }
    Ok(samples)
}

/// Load every `.plt` file below `desc.path`. Ids are the file path relative to
/// the root without extension; the `user` meta entry is the first path component.
/// Malformed files and files with < 2 in-box samples are dropped and counted.
pub fn load_geolife(desc: &RawDatasetDescriptor) -> Result<Loaded<Trajectory>> {
    if !desc.path.is_dir() {
        return Err(IngestError::FileNotFound(desc.path.clone()));
    }
    let bbox = Some(desc.bbox.unwrap_or(BBox::BEIJING));
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(&desc.path)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.into_path())
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("plt")))
        .collect();
    files.sort();
    let input_rows = files.len();
    let parsed: Vec<Option<Trajectory>> = files
        .par_iter()
        .map(|path| {
            let rel = path.strip_prefix(&desc.path).unwrap_or(path).with_extension("");
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            match parse_plt(path, bbox) {
                Ok(samples) if samples.len() >= 2 => {
                    let mut meta = BTreeMap::new();
                    if let Some(user) = id.split('/').next().filter(|u| *u != id) {
                        meta.insert("user".to_string(), user.to_string());
                    }
                    Some(Trajectory { id, samples, meta })
                }
                Ok(_) => None,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    None
                }
            }
        })
        .collect();
    finish_trajectories(desc, parsed.into_iter().flatten().collect(), input_rows)
}

/// Load raw trajectories from JSON Lines; invalid lines are dropped and counted.
pub fn load_trajectories_jsonl(desc: &RawDatasetDescriptor) -> Result<Loaded<Trajectory>> {
    let reader = BufReader::new(open(&desc.path)?);
    let mut items = Vec::new();
    let mut input_rows = 0;
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        input_rows += 1;
        match serde_json::from_str::<Trajectory>(&line) {
            Ok(t) if t.validate().is_ok() => items.push(t),
            _ => {}
        }
    }
    finish_trajectories(desc, items, input_rows)
}

/// Load trajectories in any supported trajectory format.
pub fn load_trajectories(desc: &RawDatasetDescriptor) -> Result<Loaded<Trajectory>> {
    match desc.format {
        DatasetFormat::PortoPolylineCsv => load_porto_trips(desc),
        DatasetFormat::GeolifePltDir => load_geolife(desc),
        DatasetFormat::TrajectoryJsonl => load_trajectories_jsonl(desc),
        DatasetFormat::PointCsv => Err(IngestError::HeaderMismatch(
            "point_csv is not a trajectory format".into(),
        )),
    }
}

/// Write points as CSV with columns id, lat, lon, timestamp, target, then the
/// union of feature keys in sorted order.
pub fn write_points_csv(points: &[PointRecord], path: &Path) -> Result<()> {
    let keys: BTreeSet<&str> = points
        .iter()
        .flat_map(|p| p.features.keys().map(String::as_str))
        .collect();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id", "lat", "lon", "timestamp", "target"];
    header.extend(keys.iter().copied());
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![
            p.id.clone(),
            p.point.lat().to_string(),
            p.point.lon().to_string(),
            p.timestamp.map(|t| t.to_string()).unwrap_or_default(),
            p.target.map(|t| t.to_string()).unwrap_or_default(),
        ];
        for k in &keys {
            row.push(match p.features.get(*k) {
                Some(FeatureValue::Number(v)) => v.to_string(),
                Some(FeatureValue::Text(s)) => s.clone(),
                None => String::new(),
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Descriptor matching the layout of [`write_points_csv`].
pub fn points_csv_descriptor(path: impl Into<PathBuf>, with_target: bool) -> RawDatasetDescriptor {
    let d = RawDatasetDescriptor::new(DatasetFormat::PointCsv, path)
        .bind("id", "id")
        .bind("lat", "lat")
        .bind("lon", "lon");
    if with_target {
        d.bind("target", "target")
    } else {
        d
    }
}

pub fn write_trajectories_jsonl(trajs: &[Trajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Train/test id lists. Also accepts split manifest JSON, whose extra fields
/// are ignored.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IdManifest {
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl IdManifest {
    /// Parses and rejects ids listed on both sides.
    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => IngestError::FileNotFound(path.to_path_buf()),
            _ => IngestError::Io(e),
        })?)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let train: BTreeSet<&String> = self.train.iter().collect();
        match self.test.iter().find(|id| train.contains(id)) {
            Some(id) => Err(IngestError::OverlappingIds(id.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestMode {
    /// Every manifest id must exist among the items.
    Strict,
    /// Unknown ids are ignored as long as both sides keep at least one item.
    Lenient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestSplit<T> {
    pub train: Vec<T>,
    pub test: Vec<T>,
    /// Items listed on neither side.
    pub excluded: usize,
    /// Manifest ids with no matching item.
    pub unknown: usize,
}

pub fn apply_id_manifest<T: HasId>(
    items: Vec<T>,
    manifest: &IdManifest,
    mode: ManifestMode,
) -> Result<ManifestSplit<T>> {
    manifest.check_disjoint()?;
    let train_ids: BTreeSet<&str> = manifest.train.iter().map(String::as_str).collect();
    let test_ids: BTreeSet<&str> = manifest.test.iter().map(String::as_str).collect();
    let known: BTreeSet<&str> = items.iter().map(HasId::id).collect();
    let unknown: Vec<&str> = train_ids
        .iter()
        .chain(test_ids.iter())
        .filter(|id| !known.contains(*id))
        .copied()
        .collect();
    if mode == ManifestMode::Strict && !unknown.is_empty() {
        return Err(IngestError::UnknownIds(unknown.len(), unknown[0].to_string()));
    }
    let n_unknown = unknown.len();
    let mut split = ManifestSplit {
        train: Vec::new(),
        test: Vec::new(),
        excluded: 0,
        unknown: n_unknown,
    };
    for item in items {
        if train_ids.contains(item.id()) {
            split.train.push(item);
        } else if test_ids.contains(item.id()) {
            split.test.push(item);
        } else {
            split.excluded += 1;
        }
    }
    if split.train.is_empty() {
        return Err(IngestError::EmptySplit("train"));
    }
    if split.test.is_empty() {
        return Err(IngestError::EmptySplit("test"));
    }
    Ok(split)
}
