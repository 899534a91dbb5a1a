use std::collections::BTreeMap;

use obsr_cli::artifacts::{choropleth, emit_histogram, histogram};
use obsr_cli::oracles::wasserstein_hist;
use obsr_core::regionize::{aggregate_intensity, RegionDataset, RegionRow, TargetKind};
use obsr_core::synthdata::{generate, SynthKind, SynthSpec};
use obsr_core::{CellId, GeoPoint};
use proptest::prelude::*;

fn dataset(rows: &[(CellId, f64)]) -> RegionDataset {
    RegionDataset {
        resolution: rows[0].0.resolution(),
        rows: rows.iter().map(|&(c, t)| (c, RegionRow { target: t, support: 3 })).collect(),
        target_kind: TargetKind::MeanValue,
        normalization: None,
    }
}

fn ring(feature: &serde_json::Value) -> Vec<[f64; 2]> {
    serde_json::from_value(feature["geometry"]["coordinates"][0].clone()).unwrap()
}

#[test]
fn single_cell_choropleth_is_a_closed_hexagon() {
    let c = GeoPoint::new(47.65, -122.3).unwrap().cell(9).unwrap();
    let doc = choropleth(&dataset(&[(c, 123.456)])).unwrap();
    let features = doc["features"].as_array().unwrap();
    assert_eq!(features.len(), 1);
    let r = ring(&features[0]);
    assert_eq!(r.len(), 7);
    assert_eq!(r[0], r[6]);
    assert_eq!(features[0]["properties"]["target"].as_f64(), Some(123.456));
    assert_eq!(features[0]["properties"]["cell"].as_str(), Some(c.to_string().as_str()));
}

#[test]
fn adjacent_cells_share_two_vertices() {
    let c = GeoPoint::new(47.65, -122.3).unwrap().cell(9).unwrap();
    let n = c.ring(1).unwrap()[0];
    let doc = choropleth(&dataset(&[(c, 1.0), (n, 2.0)])).unwrap();
    let rings: Vec<Vec<[f64; 2]>> = doc["features"].as_array().unwrap().iter().map(ring).collect();
    let shared = rings[0][..6]
        .iter()
        .filter(|a| rings[1][..6].iter().any(|b| (a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9))
        .count();
    assert_eq!(shared, 2);
}

#[test]
fn empty_dataset_is_rejected() {
    let empty = RegionDataset {
        resolution: 9,
        rows: BTreeMap::new(),
        target_kind: TargetKind::Intensity,
        normalization: None,
    };
    assert!(choropleth(&empty).is_err());
}

#[test]
fn uniform_values_fill_bins_evenly() {
    let v: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
    let h = histogram(&v, 4, Some((0.0, 1.0))).unwrap();
    for b in &h {
        assert!((b.count as i64 - 250).abs() <= 1, "{b:?}");
    }
    assert_eq!(h[3].bin_right, 1.0);
}

#[test]
fn histogram_csv_has_header_and_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("h.csv");
    emit_histogram(&[1.0, 2.0, 2.0, 3.0], 2, None, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "bin_left,bin_right,count\n1,2,1\n2,3,3\n");
}

#[test]
fn intensity_mass_moves_left_at_finer_resolution() {
    let spec = SynthSpec::new(SynthKind::ClusteredIntensity, 20000, 5);
    let pts = generate(&spec).unwrap().points().unwrap();
    let hist = |r: u8| -> Vec<u64> {
        let t = aggregate_intensity(&pts, r).unwrap().targets();
        histogram(&t, 20, Some((0.0, 1.0))).unwrap().iter().map(|b| b.count).collect()
    };
    let (coarse, fine) = (hist(8), hist(10));
    let share = |h: &[u64]| h[0] as f64 / h.iter().sum::<u64>() as f64;
    assert!(share(&fine) >= share(&coarse));
    assert!(wasserstein_hist(&coarse, &fine, 0.05) > 0.0);
}

proptest! {
    #[test]
    fn histogram_conserves_count(v in prop::collection::vec(-1e6f64..1e6, 1..300), bins in 1usize..40) {
        let h = histogram(&v, bins, None).unwrap();
        prop_assert_eq!(h.len(), bins);
        prop_assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), v.len() as u64);
        for w in h.windows(2) {
            prop_assert_eq!(w[0].bin_right, w[1].bin_left);
        }
    }

    #[test]
    fn clamped_range_still_conserves(v in prop::collection::vec(-5f64..5.0, 1..200)) {
        let h = histogram(&v, 10, Some((-1.0, 1.0))).unwrap();
        prop_assert_eq!(h.iter().map(|b| b.count).sum::<u64>(), v.len() as u64);
    }
}
