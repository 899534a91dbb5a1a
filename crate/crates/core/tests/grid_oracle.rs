//! Grid operations checked against a breadth-first search over single-step
//! neighbors.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use obsr_core::hexgrid::{CellId, DirectionLabel, GeoPoint, GridError};
use obsr_core::trajprep::{decode_directions, encode_directions, is_contiguous};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn neighbors(c: CellId) -> Vec<CellId> {
    DirectionLabel::all().map(|d| c.neighbor(d).unwrap()).collect()
}

/// Distance of every cell within `k` steps of `origin`.
fn bfs(origin: CellId, k: u32) -> BTreeMap<CellId, u32> {
    let mut dist = BTreeMap::from([(origin, 0)]);
    let mut queue = VecDeque::from([origin]);
    while let Some(c) = queue.pop_front() {
        let d = dist[&c];
        if d == k {
            continue;
        }
        for n in neighbors(c) {
            dist.entry(n).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    dist
}

fn origin() -> CellId {
    GeoPoint::new(47.61, -122.33).unwrap().cell(9).unwrap()
}

#[test]
fn disk_and_ring_match_bfs() {
    let o = origin();
    let dist = bfs(o, 6);
    for k in 0..=6u32 {
        let disk: BTreeSet<CellId> = o.disk(k).into_iter().collect();
        let want: BTreeSet<CellId> = dist.iter().filter(|(_, &d)| d <= k).map(|(c, _)| *c).collect();
        assert_eq!(disk, want, "disk {k}");
        let ring: BTreeSet<CellId> = o.ring(k).unwrap().into_iter().collect();
        let want: BTreeSet<CellId> = dist.iter().filter(|(_, &d)| d == k).map(|(c, _)| *c).collect();
        assert_eq!(ring, want, "ring {k}");
        let expected = if k == 0 { 1 } else { 6 * k as usize };
        assert_eq!(ring.len(), expected);
    }
}

#[test]
fn distance_and_path_match_bfs() {
    let o = origin();
    let dist = bfs(o, 10);
    let cells: Vec<CellId> = dist.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let b = cells[rng.gen_range(0..cells.len())];
        let d = dist[&b];
        assert_eq!(o.grid_distance(b).unwrap(), d);
        assert_eq!(b.grid_distance(o).unwrap(), d);
        let path = o.grid_path(b).unwrap();
        assert_eq!(path.len(), d as usize + 1);
        assert_eq!((path[0], path[path.len() - 1]), (o, b));
        assert!(path.len() == 1 || is_contiguous(&path));
    }
}

#[test]
fn direction_labels_invert_neighbor_steps() {
    for c in origin().disk(4) {
        for d in DirectionLabel::all() {
            let n = c.neighbor(d).unwrap();
            assert_eq!(c.direction_to(n).unwrap(), d);
            assert_eq!(n.direction_to(c).unwrap(), d.opposite());
        }
    }
}

#[test]
fn adjacent_cells_share_an_edge_direction() {
    let o = origin();
    let far = o.disk(3).into_iter().find(|c| o.grid_distance(*c).unwrap() == 2).unwrap();
    assert!(matches!(o.direction_to(far), Err(GridError::NotAdjacent(..))));
    assert!(matches!(o.direction_to(o), Err(GridError::NotAdjacent(..))));
}

#[test]
fn pentagons_refuse_directions() {
    let pentagon = CellId::from_u64(0x8009fffffffffff).unwrap();
    assert!(pentagon.is_pentagon());
    assert!(matches!(pentagon.ring(1), Err(GridError::PentagonEncountered(_))));
    let first = pentagon.disk(1).into_iter().find(|c| *c != pentagon).unwrap();
    assert!(pentagon.direction_to(first).is_err());
}

#[test]
fn cells_serialize_as_hex() {
    let o = origin();
    let s = serde_json::to_string(&o).unwrap();
    assert_eq!(s, format!("\"{o}\""));
    assert_eq!(serde_json::from_str::<CellId>(&s).unwrap(), o);
    assert!("zz".parse::<CellId>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_decode_round_trip(labels in prop::collection::vec(0u8..6, 0..40)) {
        let labels: Vec<DirectionLabel> = labels.into_iter().map(|l| DirectionLabel::new(l).unwrap()).collect();
        let cells = decode_directions(origin(), &labels).unwrap();
        prop_assert_eq!(encode_directions(&cells).unwrap(), labels);
    }

    #[test]
    fn distance_symmetric_and_triangle(a in 0usize..127, b in 0usize..127, c in 0usize..127) {
        let disk = origin().disk(6);
        let (a, b, c) = (disk[a], disk[b], disk[c]);
        let ab = a.grid_distance(b).unwrap();
        prop_assert_eq!(ab, b.grid_distance(a).unwrap());
        prop_assert!(ab <= a.grid_distance(c).unwrap() + c.grid_distance(b).unwrap());
        prop_assert_eq!(ab == 0, a == b);
    }

    #[test]
    fn coordinates_validated(lat in -200.0f64..200.0, lon in -400.0f64..400.0) {
        let ok = (-90.0..=90.0).contains(&lat) && (-180.0..=180.0).contains(&lon);
        prop_assert_eq!(GeoPoint::new(lat, lon).is_ok(), ok);
    }
}
