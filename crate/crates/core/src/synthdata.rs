//! Seeded synthetic datasets: point fields with known targets, clustered
//! events, hex walks, tagged features and embedding-to-target tasks.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbeddingMatrix, Provenance};
use crate::hexgrid::{cell_of, CellId, DirectionLabel, GeoPoint, GridError};
use crate::ingest::{FeatureValue, PointRecord, Sample, Trajectory};
use crate::metrics::EARTH_RADIUS_M;
use crate::regionize::{RegionDataset, RegionRow, TargetKind};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    LinearPriceField,
    ClusteredIntensity,
    ConstantDirectionWalks,
    RandomWalks,
    GappyWalks,
    /// Points tagged with `key=value` features for the count embedders.
    PoiFeatures,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    /// Target noise standard deviation.
    pub noise_sigma: f64,
    /// Price field slopes per km east (`a`) and north (`b`), plus intercept.
    pub a: f64,
    pub b: f64,
    pub intercept: f64,
    /// Snap price points onto cell centroids at this resolution.
    pub snap_resolution: Option<u8>,
    pub clusters: usize,
    /// Cluster spread as a fraction of the extent.
    pub cluster_spread: f64,
    /// Share of clustered points drawn from one broad background component
    /// (spread half the extent) instead of a hotspot.
    pub background_fraction: f64,
    pub resolution: u8,
    pub walk_length: usize,
    /// Walk lengths are drawn uniformly from `min_walk_length..=walk_length`.
    pub min_walk_length: Option<usize>,
    /// Fixed label for constant walks; random per walk when absent.
    pub direction: Option<u8>,
    pub gap_rate: f64,
    /// Seconds between consecutive walk samples.
    pub cadence_s: f64,
    /// Feature vocabulary for `poi_features`.
    pub tags: Vec<String>,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            noise_sigma: 0.0,
            a: 2.0,
            b: -1.0,
            intercept: 100.0,
            snap_resolution: None,
            clusters: 5,
            cluster_spread: 0.002,
            background_fraction: 0.5,
            resolution: 9,
            walk_length: 12,
            min_walk_length: None,
            direction: None,
            gap_rate: 0.3,
            cadence_s: 15.0,
            tags: vec![
                "amenity=cafe".into(),
                "amenity=restaurant".into(),
                "shop=supermarket".into(),
                "leisure=park".into(),
                "highway=bus_stop".into(),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    #[serde(default = "default_center")]
    pub center: GeoPoint,
    /// Half-width of the square study area in km.
    #[serde(default = "default_extent")]
    pub extent_km: f64,
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub params: SynthParams,
}

/// A mid-latitude urban area far from any grid pentagon.
pub fn default_center() -> GeoPoint {
    GeoPoint::new(47.61, -122.33).expect("valid default center")
}

fn default_extent() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq)]
pub enum SynthOutput {
    Points(Vec<PointRecord>),
    Trajectories(Vec<Trajectory>),
}

impl SynthOutput {
    pub fn points(self) -> Option<Vec<PointRecord>> {
        match self {
            SynthOutput::Points(p) => Some(p),
            SynthOutput::Trajectories(_) => None,
        }
    }

    pub fn trajectories(self) -> Option<Vec<Trajectory>> {
        match self {
            SynthOutput::Trajectories(t) => Some(t),
            SynthOutput::Points(_) => None,
        }
    }
}

const KM_PER_DEG: f64 = EARTH_RADIUS_M * std::f64::consts::PI / 180.0 / 1000.0;

/// Equirectangular (east, north) offset of `p` from `origin` in km.
pub fn local_xy(origin: GeoPoint, p: GeoPoint) -> (f64, f64) {
    let x = (p.lon() - origin.lon()) * KM_PER_DEG * origin.lat().to_radians().cos();
    let y = (p.lat() - origin.lat()) * KM_PER_DEG;
    (x, y)
}

/// Two-dimensional embedding of each cell: its centroid's offset from
/// `origin` in km. Lets sequence models see geometry without map features.
pub fn coordinate_embeddings(cells: &[CellId], origin: GeoPoint) -> EmbeddingMatrix {
    let vectors = cells
        .iter()
        .map(|&c| {
            let (x, y) = local_xy(origin, c.centroid());
            (c, vec![x, y])
        })
        .collect();
    EmbeddingMatrix {
        dim: 2,
        vectors,
        provenance: Provenance::external("centroid offsets"),
    }
}

impl SynthSpec {
    pub fn new(kind: SynthKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            center: default_center(),
            extent_km: default_extent(),
            n,
            seed,
            params: SynthParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.n == 0 {
            return bad("n must be ≥ 1".into());
        }
        if !(self.extent_km > 0.0 && self.extent_km < 500.0) {
            return bad(format!("extent {} km out of range", self.extent_km));
        }
        let half_lat = self.extent_km / KM_PER_DEG;
        if self.center.lat().abs() + half_lat > 80.0 {
            return bad("study area too close to a pole".into());
        }
        if cell_of(self.center, 0)?.is_pentagon() {
            return bad("study area lies on a pentagon base cell".into());
        }
        let p = &self.params;
        if p.resolution > 15 {
            return bad(format!("resolution {}", p.resolution));
        }
        if matches!(self.kind, SynthKind::ConstantDirectionWalks | SynthKind::RandomWalks | SynthKind::GappyWalks)
            && (p.walk_length < 2 || p.min_walk_length.is_some_and(|m| m < 2 || m > p.walk_length))
        {
            return bad("walk lengths must be ≥ 2 and min ≤ max".into());
        }
        if !(0.0..1.0).contains(&p.gap_rate) {
            return bad(format!("gap rate {} outside [0, 1)", p.gap_rate));
        }
        if p.direction.is_some_and(|d| d > 5) {
            return bad("direction label must be 0..=5".into());
        }
        if p.noise_sigma < 0.0 || !p.noise_sigma.is_finite() {
            return bad("noise sigma must be finite and ≥ 0".into());
        }
        if self.kind == SynthKind::ClusteredIntensity && p.clusters == 0 {
            return bad("need at least one cluster".into());
        }
        if !(0.0..=1.0).contains(&p.background_fraction) || !(p.cluster_spread > 0.0) {
            return bad("background fraction must be in [0, 1] and spread positive".into());
        }
        if self.kind == SynthKind::PoiFeatures && p.tags.is_empty() {
            return bad("need at least one tag".into());
        }
        if !(p.cadence_s > 0.0) {
            return bad("cadence must be positive".into());
        }
        Ok(())
    }

    /// Local planar coordinates in km (east, north) relative to the center.
    pub fn local_xy(&self, p: GeoPoint) -> (f64, f64) {
        local_xy(self.center, p)
    }

    fn from_xy(&self, x: f64, y: f64) -> GeoPoint {
        let lat = self.center.lat() + y / KM_PER_DEG;
        let lon = self.center.lon() + x / (KM_PER_DEG * self.center.lat().to_radians().cos());
        GeoPoint::new(lat.clamp(-90.0, 90.0), lon.clamp(-180.0, 180.0)).expect("clamped coordinate")
    }

    /// Noise-free price at `p`.
    pub fn price_at(&self, p: GeoPoint) -> f64 {
        let (x, y) = self.local_xy(p);
        self.params.a * x + self.params.b * y + self.params.intercept
    }

    fn item_rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }

    fn uniform_point<R: Rng>(&self, rng: &mut R) -> GeoPoint {
        let e = self.extent_km;
        self.from_xy(rng.gen_range(-e..e), rng.gen_range(-e..e))
    }
}

/// Generate the dataset described by `spec`. Item `i` draws from its own RNG
/// stream, so output is independent of thread count.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    match spec.kind {
        SynthKind::LinearPriceField => price_field(spec).map(SynthOutput::Points),
        SynthKind::ClusteredIntensity => Ok(SynthOutput::Points(clustered(spec))),
        SynthKind::PoiFeatures => Ok(SynthOutput::Points(poi_features(spec))),
        SynthKind::ConstantDirectionWalks | SynthKind::RandomWalks | SynthKind::GappyWalks => {
            walks(spec).map(SynthOutput::Trajectories)
        }
    }
}

fn item_id(i: usize) -> String {
    format!("s{i:06}")
}

fn price_field(spec: &SynthSpec) -> Result<Vec<PointRecord>> {
    let noise = Normal::new(0.0, spec.params.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.item_rng(i);
            let mut p = spec.uniform_point(&mut rng);
            if let Some(r) = spec.params.snap_resolution {
                p = cell_of(p, r)?.centroid();
            }
            let eps = if spec.params.noise_sigma > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            Ok(PointRecord::new(item_id(i), p).with_target(spec.price_at(p) + eps))
        })
        .collect()
}

/// Cluster centers and mixture weights (weights decay geometrically).
pub fn cluster_layout(spec: &SynthSpec) -> Vec<(GeoPoint, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = spec.params.clusters;
    let raw: Vec<f64> = (0..k).map(|j| 0.6f64.powi(j as i32)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter()
        .map(|w| (spec.uniform_point(&mut rng), w / total))
        .collect()
}

fn clustered(spec: &SynthSpec) -> Vec<PointRecord> {
    let layout = cluster_layout(spec);
    let spread = spec.params.cluster_spread * spec.extent_km;
    let normal = Normal::new(0.0, spread).expect("positive spread");
    let broad = Normal::new(0.0, 0.5 * spec.extent_km).expect("positive extent");
    (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.item_rng(i);
            if rng.gen_bool(spec.params.background_fraction) {
                let p = spec.from_xy(broad.sample(&mut rng), broad.sample(&mut rng));
                return PointRecord::new(item_id(i), p);
            }
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut center = layout[layout.len() - 1].0;
            for (c, w) in &layout {
                acc += w;
                if u < acc {
                    center = *c;
                    break;
                }
            }
            let (cx, cy) = spec.local_xy(center);
            let p = spec.from_xy(cx + normal.sample(&mut rng), cy + normal.sample(&mut rng));
            PointRecord::new(item_id(i), p)
        })
        .collect()
}

fn poi_features(spec: &SynthSpec) -> Vec<PointRecord> {
    let tags = &spec.params.tags;
    (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.item_rng(i);
            let p = spec.uniform_point(&mut rng);
            // Tag preference drifts with position so counts carry spatial signal.
            let (x, _) = spec.local_xy(p);
            let shift = ((x / spec.extent_km + 1.0) * 0.5 * tags.len() as f64) as usize;
            let j = if rng.gen_bool(0.5) {
                shift.min(tags.len() - 1)
            } else {
                rng.gen_range(0..tags.len())
            };
            let mut rec = PointRecord::new(item_id(i), p);
            rec.features
                .insert("tag".into(), FeatureValue::Text(tags[j].clone()));
            rec
        })
        .collect()
}

fn random_label<R: Rng>(rng: &mut R) -> DirectionLabel {
    DirectionLabel::new(rng.gen_range(0..6)).expect("label in range")
}

fn walks(spec: &SynthSpec) -> Result<Vec<Trajectory>> {
    let p = &spec.params;
    (0..spec.n)
        .into_par_iter()
        .map(|i| {
            let mut rng = spec.item_rng(i);
            let start = cell_of(spec.uniform_point(&mut rng), p.resolution)?;
            let len = match p.min_walk_length {
                Some(m) => rng.gen_range(m..=p.walk_length),
                None => p.walk_length,
            };
            let fixed = match p.direction {
                Some(d) => Some(DirectionLabel::new(d)?),
                None if spec.kind == SynthKind::ConstantDirectionWalks => Some(random_label(&mut rng)),
                None => None,
            };
            let mut cells = vec![start];
            for _ in 1..len {
                let d = fixed.unwrap_or_else(|| random_label(&mut rng));
                let next = cells[cells.len() - 1].neighbor(d)?;
                cells.push(next);
            }
            let mut keep: Vec<usize> = (0..len).collect();
            if spec.kind == SynthKind::GappyWalks {
                keep.retain(|&j| j == 0 || j == len - 1 || !rng.gen_bool(p.gap_rate));
            }
            let samples = keep
                .into_iter()
                .map(|j| Sample {
                    point: cells[j].centroid(),
                    t: p.cadence_s * j as f64,
                })
                .collect();
            Ok(Trajectory {
                id: item_id(i),
                samples,
                meta: BTreeMap::new(),
            })
        })
        .collect()
}

/// Distinct cells drawn from a disk around the cell containing `center`.
pub fn random_cells(center: GeoPoint, res: u8, n: usize, seed: u64) -> Result<Vec<CellId>> {
    let origin = cell_of(center, res)?;
    let mut k = 1u32;
    while 1 + 3 * k * (k + 1) < (2 * n) as u32 {
        k += 1;
    }
    let mut pool = origin.disk(k);
    pool.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.sort();
    Ok(pool)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Identity,
    Sigmoid,
}

/// A region task whose target is a known function of a random embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTask {
    pub embeddings: EmbeddingMatrix,
    pub targets: RegionDataset,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// `n_cells` cells with standard-normal embeddings of size `dim` and target
/// `link(w·e + bias) + noise`.
pub fn embedding_task(
    n_cells: usize,
    dim: usize,
    noise_sigma: f64,
    link: Link,
    res: u8,
    seed: u64,
) -> Result<EmbeddingTask> {
    if n_cells == 0 || dim == 0 {
        return Err(SynthError::InvalidSpec("need at least one cell and one dimension".into()));
    }
    let cells = random_cells(default_center(), res, n_cells, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let scale = 1.0 / (dim as f64).sqrt();
    let weights: Vec<f64> = (0..dim).map(|_| std.sample(&mut rng) * scale).collect();
    let bias = match link {
        Link::Identity => 0.5,
        Link::Sigmoid => 0.0,
    };
    let mut vectors = BTreeMap::new();
    let mut rows = BTreeMap::new();
    for &c in &cells {
        let e: Vec<f64> = (0..dim).map(|_| std.sample(&mut rng)).collect();
        let z: f64 = e.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>() + bias;
        let clean = match link {
            Link::Identity => z,
            Link::Sigmoid => 1.0 / (1.0 + (-2.0 * z).exp()),
        };
        let noise = if noise_sigma > 0.0 {
            std.sample(&mut rng) * noise_sigma
        } else {
            0.0
        };
        let target = match link {
            Link::Identity => clean + noise,
            Link::Sigmoid => (clean + noise).clamp(0.0, 1.0),
        };
        vectors.insert(c, e);
        rows.insert(c, RegionRow { target, support: 1 });
    }
    Ok(EmbeddingTask {
        embeddings: EmbeddingMatrix {
            dim,
            vectors,
            provenance: Provenance::external("synthetic"),
        },
        targets: RegionDataset {
            resolution: res,
            rows,
            target_kind: match link {
                Link::Identity => TargetKind::MeanValue,
                Link::Sigmoid => TargetKind::Intensity,
            },
            normalization: None,
        },
        weights,
        bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajprep::{encode_directions, hexify};

    #[test]
    fn constant_walks_repeat_one_label() {
        let mut spec = SynthSpec::new(SynthKind::ConstantDirectionWalks, 5, 1);
        spec.params.walk_length = 10;
        let walks = generate(&spec).unwrap().trajectories().unwrap();
        for w in walks {
            let h = hexify(&w, 9).unwrap();
            let labels = encode_directions(&h.cells).unwrap();
            assert_eq!(labels.len(), 9);
            assert!(labels.iter().all(|&l| l == labels[0]));
        }
    }

    #[test]
    fn deterministic_for_seed() {
        for kind in [
            SynthKind::LinearPriceField,
            SynthKind::ClusteredIntensity,
            SynthKind::RandomWalks,
            SynthKind::GappyWalks,
            SynthKind::PoiFeatures,
        ] {
            let spec = SynthSpec::new(kind, 20, 7);
            assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = SynthSpec::new(SynthKind::RandomWalks, 0, 1);
        assert!(generate(&spec).is_err());
        spec.n = 3;
        spec.params.walk_length = 1;
        assert!(generate(&spec).is_err());
        let mut spec = SynthSpec::new(SynthKind::LinearPriceField, 3, 1);
        spec.center = GeoPoint::new(89.0, 0.0).unwrap();
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn gappy_walks_keep_endpoints() {
        let mut spec = SynthSpec::new(SynthKind::GappyWalks, 10, 3);
        spec.params.walk_length = 20;
        for w in generate(&spec).unwrap().trajectories().unwrap() {
            assert_eq!(w.samples[0].t, 0.0);
            assert_eq!(w.samples.last().unwrap().t, 19.0 * spec.params.cadence_s);
            assert!(w.samples.len() <= 20);
        }
    }

    #[test]
    fn embedding_task_targets() {
        let t = embedding_task(30, 4, 0.0, Link::Sigmoid, 9, 5).unwrap();
        assert_eq!(t.targets.len(), 30);
        assert!(t.targets.targets().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(t.embeddings.vectors.len(), 30);
    }
}
