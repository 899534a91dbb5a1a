use obsr_core::hexgrid::{CellId, GeoPoint};
use obsr_core::metrics::*;
use proptest::prelude::*;

/// Textbook recursive DTW over every alignment.
fn dtw_recursive(a: &[GeoPoint], b: &[GeoPoint], i: usize, j: usize) -> f64 {
    let d = haversine(a[i], b[j]);
    match (i, j) {
        (0, 0) => d,
        (0, _) => d + dtw_recursive(a, b, 0, j - 1),
        (_, 0) => d + dtw_recursive(a, b, i - 1, 0),
        _ => {
            d + dtw_recursive(a, b, i - 1, j)
                .min(dtw_recursive(a, b, i, j - 1))
                .min(dtw_recursive(a, b, i - 1, j - 1))
        }
    }
}

fn disk() -> Vec<CellId> {
    GeoPoint::new(47.61, -122.33).unwrap().cell(9).unwrap().disk(5)
}

fn cells() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..91, 1..=6)
}

#[test]
fn one_degree_of_longitude_at_equator() {
    let d = haversine(GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, 1.0).unwrap());
    assert!((d - 111_195.0).abs() / 111_195.0 < 1e-3, "{d}");
}

#[test]
fn hand_computed_fixtures() {
    let r = regression_metrics(&[2.0, 4.0], &[3.0, 3.0]).unwrap();
    assert!((r.get("mape").unwrap() - 37.5).abs() < 1e-9);
    // |1| / 2.5 and |1| / 3.5, averaged
    let smape = 100.0 * (1.0 / 2.5 + 1.0 / 3.5) / 2.0;
    assert!((r.get("smape").unwrap() - smape).abs() < 1e-9);
    assert!((r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.5).abs() < 1e-9);
    assert!((r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap()).abs() < 1e-9);
    assert!(matches!(r2(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ZeroVariance)));
}

#[test]
fn evaluate_at_k_reports_each_horizon() {
    let d = disk();
    let pairs = vec![(d[..12].to_vec(), d[1..13].to_vec()), (d[5..9].to_vec(), d[5..9].to_vec())];
    let reports = evaluate_at_k(&pairs, &DEFAULT_KS).unwrap();
    assert_eq!(reports.iter().map(|r| r.k.unwrap()).collect::<Vec<_>>(), DEFAULT_KS);
    for r in &reports {
        assert!(r.is_valid());
    }
    assert_eq!(reports[0].get(H_DIST), reports[0].get(DTW_DIST));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn dtw_matches_recursion(a in cells(), b in cells()) {
        let d = disk();
        let pa: Vec<GeoPoint> = a.iter().map(|&i| d[i].centroid()).collect();
        let pb: Vec<GeoPoint> = b.iter().map(|&i| d[i].centroid()).collect();
        let fast = dtw(&pa, &pb, haversine);
        let slow = dtw_recursive(&pa, &pb, pa.len() - 1, pb.len() - 1);
        prop_assert!((fast - slow).abs() <= 1e-9 * slow.max(1.0));
        prop_assert!((fast - dtw(&pb, &pa, haversine)).abs() <= 1e-9 * slow.max(1.0));
    }

    #[test]
    fn k1_average_equals_dtw(a in cells(), b in cells()) {
        let d = disk();
        let ca: Vec<CellId> = a.iter().map(|&i| d[i]).collect();
        let cb: Vec<CellId> = b.iter().map(|&i| d[i]).collect();
        prop_assert_eq!(avg_haversine(&ca, &cb, 1).unwrap(), dtw_haversine(&ca, &cb, 1).unwrap());
    }

    #[test]
    fn identical_sequences_score_perfectly(a in cells(), k in 1usize..12) {
        let d = disk();
        let ca: Vec<CellId> = a.iter().map(|&i| d[i]).collect();
        prop_assert_eq!(avg_haversine(&ca, &ca, k).unwrap(), 0.0);
        prop_assert_eq!(dtw_haversine(&ca, &ca, k).unwrap(), 0.0);
        prop_assert_eq!(sequence_accuracy(&ca, &ca, k).unwrap(), 100.0);
    }

    #[test]
    fn smape_bounded(y in prop::collection::vec(-1e3f64..1e3, 1..20), seed in any::<u64>()) {
        let yhat: Vec<f64> = y.iter().enumerate().map(|(i, v)| v * ((seed >> (i % 60)) & 3) as f64 - 1.0).collect();
        let r = regression_metrics(&y, &yhat).unwrap();
        let s = r.get("smape").unwrap();
        prop_assert!((0.0..=200.0 + 1e-9).contains(&s));
        prop_assert!((r.get("rmse").unwrap().powi(2) - r.get("mse").unwrap()).abs() <= 1e-9 * r.get("mse").unwrap().max(1.0));
    }

    #[test]
    fn horizon_means_ignore_pair_order(a in cells(), b in cells(), c in cells()) {
        let d = disk();
        let seq = |v: &Vec<usize>| v.iter().map(|&i| d[i]).collect::<Vec<CellId>>();
        let pairs = vec![(seq(&a), seq(&b)), (seq(&b), seq(&c)), (seq(&c), seq(&a))];
        let mut rev = pairs.clone();
        rev.reverse();
        prop_assert_eq!(evaluate_at_k(&pairs, &[3]).unwrap(), evaluate_at_k(&rev, &[3]).unwrap());
    }
}
