use obsr_core::regionize::{aggregate_intensity, aggregate_mean, multi_resolution, TargetKind};
use obsr_core::synthdata::{generate, SynthKind, SynthSpec};

#[test]
fn noise_free_price_field_is_linear_at_centroids() {
    let mut spec = SynthSpec::new(SynthKind::LinearPriceField, 3000, 9);
    spec.params.snap_resolution = Some(9);
    let points = generate(&spec).unwrap().points().unwrap();
    let ds = aggregate_mean(&points, 9).unwrap();
    for (c, row) in &ds.rows {
        assert!((row.target - spec.price_at(c.centroid())).abs() < 1e-9, "{c}");
    }
}

#[test]
fn same_spec_same_bytes() {
    let spec = SynthSpec::new(SynthKind::ClusteredIntensity, 500, 3);
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str| {
        let p = dir.path().join(name);
        let pts = generate(&spec).unwrap().points().unwrap();
        obsr_core::ingest::write_points_csv(&pts, &p).unwrap();
        std::fs::read(p).unwrap()
    };
    assert_eq!(write("a.csv"), write("b.csv"));
}

#[test]
fn intensity_median_falls_with_resolution() {
    let spec = SynthSpec::new(SynthKind::ClusteredIntensity, 20000, 5);
    let points = generate(&spec).unwrap().points().unwrap();
    let by_res = multi_resolution(&points, &[8, 9, 10], TargetKind::Intensity).unwrap();
    let median = |r: u8| {
        let mut t = by_res[&r].targets();
        t.sort_by(f64::total_cmp);
        t[t.len() / 2]
    };
    assert!(median(8) > median(9) && median(9) > median(10));
    assert_eq!(aggregate_intensity(&points, 10).unwrap().total_support(), 20000);
}
