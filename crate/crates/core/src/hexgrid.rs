//! Hierarchical hexagonal grid (H3-compatible) backed by `h3o`.
//!
//! Cells serialize as 15-character lowercase hexadecimal strings.

use std::fmt;
use std::str::FromStr;

use h3o::{CellIndex, LatLng, Resolution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid resolution {0} (expected 0..=15)")]
    InvalidResolution(u8),
    #[error("invalid coordinate lat={lat} lon={lon}")]
    InvalidCoordinate { lat: f64, lon: f64 },
    #[error("invalid cell index {0:?}")]
    InvalidCell(String),
    #[error("ring around {0} crosses pentagon distortion")]
    PentagonEncountered(CellId),
    #[error("cells {0} and {1} have different resolutions")]
    ResolutionMismatch(CellId, CellId),
    #[error("grid distance between {0} and {1} is undefined")]
    DistanceUndefined(CellId, CellId),
    #[error("grid path between {0} and {1} is undefined")]
    PathUndefined(CellId, CellId),
    #[error("cells {0} and {1} are not adjacent")]
    NotAdjacent(CellId, CellId),
    #[error("neighborhood of {0} touches a pentagon")]
    PentagonNeighborhood(CellId),
    #[error("direction label {0} out of range 0..=5")]
    InvalidDirection(u8),
}

/// WGS84 coordinate in degrees, validated at construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = GridError;

    fn try_from(p: RawPoint) -> Result<Self, Self::Error> {
        GeoPoint::new(p.lat, p.lon)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint {
            lat: p.lat,
            lon: p.lon,
        }
    }
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GridError> {
        if !lat.is_finite()
            || !lon.is_finite()
            || !(-90.0..=90.0).contains(&lat)
            || !(-180.0..=180.0).contains(&lon)
        {
            return Err(GridError::InvalidCoordinate { lat, lon });
        }
        Ok(Self { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    /// The cell at `res` containing this point.
    pub fn cell(&self, res: u8) -> Result<CellId, GridError> {
        cell_of(*self, res)
    }
}

fn resolution(res: u8) -> Result<Resolution, GridError> {
    Resolution::try_from(res).map_err(|_| GridError::InvalidResolution(res))
}

pub fn cell_of(p: GeoPoint, res: u8) -> Result<CellId, GridError> {
    let r = resolution(res)?;
    let ll = LatLng::new(p.lat, p.lon).map_err(|_| GridError::InvalidCoordinate {
        lat: p.lat,
        lon: p.lon,
    })?;
    Ok(CellId(ll.to_cell(r)))
}

/// Neighbor slot of a hexagon, `0..=5`.
///
/// Labels follow the order in which a unit ring is walked by the grid standard
/// (H3 direction digits `I, IJ, J, JK, K, IK`), so `(d + 3) % 6` is the opposite
/// slot of `d`. Slots are expressed in the cell's own IJK frame, which is shared
/// by every cell of the same base cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct DirectionLabel(u8);

/// H3 direction digit of each label.
const LABEL_DIGITS: [u8; 6] = [4, 6, 2, 3, 1, 5];

impl DirectionLabel {
    pub const COUNT: usize = 6;

    pub fn new(value: u8) -> Result<Self, GridError> {
        if value < 6 {
            Ok(Self(value))
        } else {
            Err(GridError::InvalidDirection(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn opposite(self) -> Self {
        Self((self.0 + 3) % 6)
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..6).map(Self)
    }

    fn from_digit(digit: u8) -> Option<Self> {
        LABEL_DIGITS
            .iter()
            .position(|&d| d == digit)
            .map(|i| Self(i as u8))
    }
}

impl TryFrom<u8> for DirectionLabel {
    type Error = GridError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<DirectionLabel> for u8 {
    fn from(d: DirectionLabel) -> u8 {
        d.0
    }
}

/// A valid grid cell.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellId(CellIndex);

impl CellId {
    pub fn from_u64(index: u64) -> Result<Self, GridError> {
        CellIndex::try_from(index)
            .map(Self)
            .map_err(|_| GridError::InvalidCell(format!("{index:x}")))
    }

    pub fn as_u64(self) -> u64 {
        u64::from(self.0)
    }

    pub fn resolution(self) -> u8 {
        u8::from(self.0.resolution())
    }

    pub fn is_pentagon(self) -> bool {
        self.0.is_pentagon()
    }

    pub fn base_cell(self) -> u8 {
        u8::from(self.0.base_cell())
    }

    pub fn parent(self, res: u8) -> Result<Self, GridError> {
        let r = resolution(res)?;
        self.0
            .parent(r)
            .map(Self)
            .ok_or(GridError::InvalidResolution(res))
    }

    pub fn children(self, res: u8) -> Result<Vec<Self>, GridError> {
        let r = resolution(res)?;
        Ok(self.0.children(r).map(Self).collect())
    }

    pub fn centroid(self) -> GeoPoint {
        let ll = LatLng::from(self.0);
        GeoPoint {
            lat: ll.lat(),
            lon: ll.lng(),
        }
    }

    /// Boundary vertices in counter-clockwise order (not closed).
    pub fn boundary(self) -> Vec<GeoPoint> {
        self.0
            .boundary()
            .iter()
            .map(|ll| GeoPoint {
                lat: ll.lat(),
                lon: ll.lng(),
            })
            .collect()
    }

    /// Cells at exactly grid distance `k`.
    pub fn ring(self, k: u32) -> Result<Vec<Self>, GridError> {
        self.0
            .grid_ring_fast(k)
            .map(|c| c.map(Self))
            .collect::<Option<Vec<_>>>()
            .ok_or(GridError::PentagonEncountered(self))
    }

    /// Cells at grid distance `≤ k`, including `self`.
    pub fn disk(self, k: u32) -> Vec<Self> {
        self.0.grid_disk::<Vec<_>>(k).into_iter().map(Self).collect()
    }

    /// Disk with each cell's grid distance; works around pentagons.
    pub fn disk_distances(self, k: u32) -> Vec<(Self, u32)> {
        self.0
            .grid_disk_distances::<Vec<_>>(k)
            .into_iter()
            .map(|(c, d)| (Self(c), d))
            .collect()
    }

    pub fn grid_distance(self, other: Self) -> Result<u32, GridError> {
        if self.resolution() != other.resolution() {
            return Err(GridError::ResolutionMismatch(self, other));
        }
        self.0
            .grid_distance(other.0)
            .ok()
            .and_then(|d| u32::try_from(d).ok())
            .ok_or(GridError::DistanceUndefined(self, other))
    }

    /// Shortest neighbor-to-neighbor path from `self` to `other`, both inclusive.
    ///
    /// Paths are traced by cube-rounded linear interpolation in local IJK
    /// coordinates, so the output is deterministic for a given pair.
    pub fn grid_path(self, other: Self) -> Result<Vec<Self>, GridError> {
        if self.resolution() != other.resolution() {
            return Err(GridError::ResolutionMismatch(self, other));
        }
        let expected = self.grid_distance(other)? as usize + 1;
        let path = self
            .0
            .grid_path_cells(other.0)
            .and_then(|it| it.map(|c| c.map(Self)).collect::<Result<Vec<_>, _>>())
            .map_err(|_| GridError::PathUndefined(self, other))?;
        if path.len() != expected
            || path.windows(2).any(|w| !w[0].is_neighbor(w[1]))
        {
            return Err(GridError::PathUndefined(self, other));
        }
        Ok(path)
    }

    pub fn is_neighbor(self, other: Self) -> bool {
        self.0.is_neighbor_with(other.0).unwrap_or(false)
    }

    /// Slot of `self` occupied by the adjacent cell `other`.
    pub fn direction_to(self, other: Self) -> Result<DirectionLabel, GridError> {
        if self.is_pentagon() || other.is_pentagon() {
            return Err(GridError::PentagonNeighborhood(self));
        }
        let edge = self.0.edge(other.0).ok_or(GridError::NotAdjacent(self, other))?;
        DirectionLabel::from_digit(u8::from(edge.edge())).ok_or(GridError::NotAdjacent(self, other))
    }

    /// The neighbor in slot `d`.
    pub fn neighbor(self, d: DirectionLabel) -> Result<Self, GridError> {
        if self.is_pentagon() {
            return Err(GridError::PentagonNeighborhood(self));
        }
        let digit = LABEL_DIGITS[d.index()];
        let next = self
            .0
            .edges()
            .find(|e| u8::from(e.edge()) == digit)
            .map(|e| Self(e.destination()))
            .ok_or(GridError::PentagonNeighborhood(self))?;
        if next.is_pentagon() {
            return Err(GridError::PentagonNeighborhood(next));
        }
        Ok(next)
    }
}

pub fn centroid(c: CellId) -> GeoPoint {
    c.centroid()
}

pub fn ring(c: CellId, k: u32) -> Result<Vec<CellId>, GridError> {
    c.ring(k)
}

pub fn disk(c: CellId, k: u32) -> Vec<CellId> {
    c.disk(k)
}

pub fn grid_distance(a: CellId, b: CellId) -> Result<u32, GridError> {
    a.grid_distance(b)
}

pub fn grid_path(a: CellId, b: CellId) -> Result<Vec<CellId>, GridError> {
    a.grid_path(b)
}

pub fn direction_between(a: CellId, b: CellId) -> Result<DirectionLabel, GridError> {
    a.direction_to(b)
}

pub fn neighbor_in_direction(c: CellId, d: DirectionLabel) -> Result<CellId, GridError> {
    c.neighbor(d)
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:015x}", self.as_u64())
    }
}

impl fmt::Debug for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CellId({self})")
    }
}

impl FromStr for CellId {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = u64::from_str_radix(s.trim(), 16).map_err(|_| GridError::InvalidCell(s.to_string()))?;
        Self::from_u64(raw).map_err(|_| GridError::InvalidCell(s.to_string()))
    }
}

impl Serialize for CellId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sf() -> CellId {
        "8928308280fffff".parse().unwrap()
    }

    #[test]
    fn reference_cell_and_centroid() {
        let p = GeoPoint::new(37.7752702151959, -122.418307270836).unwrap();
        let c = cell_of(p, 9).unwrap();
        assert_eq!(c.to_string(), "8928308280fffff");
        let ctr = c.centroid();
        assert!((ctr.lat() - 37.77670).abs() < 1e-4);
        assert!((ctr.lon() - -122.41846).abs() < 1e-4);
        assert_eq!(cell_of(p, 8).unwrap(), c.parent(8).unwrap());
    }

    #[test]
    fn invalid_inputs() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, f64::NAN).is_err());
        let p = GeoPoint::new(0.0, 0.0).unwrap();
        assert_eq!(cell_of(p, 16), Err(GridError::InvalidResolution(16)));
        assert!("zzz".parse::<CellId>().is_err());
        assert!("0".parse::<CellId>().is_err());
    }

    #[test]
    fn small_rings_and_disks() {
        let c = sf();
        assert_eq!(c.ring(0).unwrap(), vec![c]);
        assert_eq!(c.ring(1).unwrap().len(), 6);
        assert_eq!(c.disk(0), vec![c]);
        assert_eq!(c.disk(1).len(), 7);
        assert_eq!(c.disk(3).len(), 1 + 3 * 3 * 4);
        for n in c.ring(1).unwrap() {
            assert_eq!(c.grid_distance(n).unwrap(), 1);
            assert_eq!(c.grid_path(n).unwrap(), vec![c, n]);
        }
        assert_eq!(c.grid_path(c).unwrap(), vec![c]);
    }

    #[test]
    fn direction_slots_are_a_bijection() {
        let c = sf();
        let mut labels: Vec<u8> = c
            .ring(1)
            .unwrap()
            .into_iter()
            .map(|n| c.direction_to(n).unwrap().value())
            .collect();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4, 5]);
        for d in DirectionLabel::all() {
            let n = c.neighbor(d).unwrap();
            assert_eq!(c.direction_to(n).unwrap(), d);
            assert_eq!(n.neighbor(d.opposite()).unwrap(), c);
        }
        let far = c.ring(2).unwrap()[0];
        assert!(matches!(c.direction_to(far), Err(GridError::NotAdjacent(..))));
    }

    #[test]
    fn pentagons_are_rejected() {
        let pent = CellId::from_u64(0x8009fffffffffff).unwrap();
        assert!(pent.is_pentagon());
        let label = DirectionLabel::new(0).unwrap();
        assert!(matches!(pent.neighbor(label), Err(GridError::PentagonNeighborhood(_))));
        assert_eq!(pent.disk(1).len(), 6);
    }

    #[test]
    fn serde_as_hex_string() {
        let c = sf();
        assert_eq!(serde_json::to_string(&c).unwrap(), "\"8928308280fffff\"");
        let back: CellId = serde_json::from_str("\"8928308280fffff\"").unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<GeoPoint>(r#"{"lat": 95.0, "lon": 0.0}"#).is_err());
    }
}
