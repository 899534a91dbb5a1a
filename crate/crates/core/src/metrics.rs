//! Regression and sequence metrics, plus markdown table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hexgrid::{CellId, GeoPoint};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Horizons reported for next-region prediction.
pub const DEFAULT_KS: [usize; 5] = [1, 3, 5, 7, 10];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} targets vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptySequence,
    #[error("targets have zero variance")]
    ZeroVariance,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("k must be positive")]
    InvalidK,
}

pub type Result<T> = std::result::Result<T, MetricError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub entries: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_hint: Option<String>,
    /// Side counts such as the number of zero targets excluded from MAPE.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub counts: BTreeMap<String, usize>,
}

impl MetricReport {
    pub fn new(task: impl Into<String>, n_samples: usize) -> Self {
        Self {
            task: task.into(),
            entries: BTreeMap::new(),
            k: None,
            n_samples,
            scale_hint: None,
            counts: BTreeMap::new(),
        }
    }

    pub fn get(&self, metric: &str) -> Option<f64> {
        self.entries.get(metric).copied()
    }

    pub fn insert(&mut self, metric: &str, value: f64) {
        self.entries.insert(metric.to_string(), value);
    }

    pub fn is_valid(&self) -> bool {
        self.n_samples >= 1 && self.entries.values().all(|v| v.is_finite())
    }
}

fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MetricError::NonFinite(what))
    }
}

/// MSE, RMSE, MAE, MAPE and sMAPE (percentages on a 0–100 scale).
///
/// MAPE skips zero targets and records how many were skipped under
/// `counts["mape_excluded"]`; it is absent when every target is zero.
pub fn regression_metrics(y: &[f64], yhat: &[f64]) -> Result<MetricReport> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    check_finite(y, "targets")?;
    check_finite(yhat, "predictions")?;
    let n = y.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    let mut ape = 0.0;
    let mut ape_n = 0usize;
    let mut sape = 0.0;
    for (&t, &p) in y.iter().zip(yhat) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
        if t != 0.0 {
            ape += e.abs() / t.abs();
            ape_n += 1;
        }
        let denom = (t.abs() + p.abs()) / 2.0;
        if denom > 0.0 {
            sape += e.abs() / denom;
        }
    }
    let mse = se / n;
    let mut report = MetricReport::new("regression", y.len());
    report.insert("mse", mse);
    report.insert("rmse", mse.sqrt());
    report.insert("mae", ae / n);
    if ape_n > 0 {
        report.insert("mape", 100.0 * ape / ape_n as f64);
    }
    report.insert("smape", 100.0 * sape / n);
    report.counts.insert("mape_excluded".into(), y.len() - ape_n);
    Ok(report)
}

/// Coefficient of determination; negative for predictors worse than the mean.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(MetricError::LengthMismatch(y.len(), yhat.len()));
    }
    if y.len() < 2 {
        return Err(MetricError::ZeroVariance);
    }
    check_finite(y, "targets")?;
    check_finite(yhat, "predictions")?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Great-circle distance in meters.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat().to_radians(), b.lat().to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon() - a.lon()).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

fn cell_distance(a: CellId, b: CellId) -> f64 {
    if a == b {
        0.0
    } else {
        haversine(a.centroid(), b.centroid())
    }
}

fn horizon(pred: &[CellId], gold: &[CellId], k: usize) -> Result<usize> {
    if pred.is_empty() || gold.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    Ok(k.min(pred.len()).min(gold.len()))
}

/// Mean centroid distance over aligned positions `< min(k, |pred|, |gold|)`.
pub fn avg_haversine(pred: &[CellId], gold: &[CellId], k: usize) -> Result<f64> {
    let n = horizon(pred, gold, k)?;
    let total: f64 = (0..n).map(|i| cell_distance(pred[i], gold[i])).sum();
    Ok(total / n as f64)
}

/// Unwindowed, unnormalized DTW over centroid distances of the first `k` cells
/// of each sequence.
pub fn dtw_haversine(pred: &[CellId], gold: &[CellId], k: usize) -> Result<f64> {
    if pred.is_empty() || gold.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    if k == 0 {
        return Err(MetricError::InvalidK);
    }
    let a: Vec<GeoPoint> = pred[..k.min(pred.len())].iter().map(|c| c.centroid()).collect();
    let b: Vec<GeoPoint> = gold[..k.min(gold.len())].iter().map(|c| c.centroid()).collect();
    Ok(dtw(&a, &b, haversine))
}

/// DTW with an arbitrary point cost. Both inputs must be non-empty.
pub fn dtw<T, F: Fn(T, T) -> f64>(a: &[T], b: &[T], cost: F) -> f64
where
    T: Copy,
{
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, &ai) in a.iter().enumerate() {
        for j in 0..m {
            let d = cost(ai, b[j]);
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = d + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m - 1]
}

/// Percentage of exactly matching positions among the first `min(k, |pred|, |gold|)`.
pub fn sequence_accuracy(pred: &[CellId], gold: &[CellId], k: usize) -> Result<f64> {
    let n = horizon(pred, gold, k)?;
    let hits = (0..n).filter(|&i| pred[i] == gold[i]).count();
    Ok(100.0 * hits as f64 / n as f64)
}

/// Order-independent mean: values are sorted before summation.
fn stable_mean(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub const H_DIST: &str = "h_dist_m";
pub const DTW_DIST: &str = "dtw_dist_m";
pub const SEQ_ACC: &str = "seq_acc_pct";

/// Per-horizon means of average haversine, DTW and sequence accuracy.
///
/// Accuracy is averaged per pair first, then across pairs.
pub fn evaluate_at_k(pairs: &[(Vec<CellId>, Vec<CellId>)], ks: &[usize]) -> Result<Vec<MetricReport>> {
    if pairs.is_empty() {
        return Err(MetricError::EmptySequence);
    }
    ks.iter()
        .map(|&k| {
            let per_pair = pairs
                .par_iter()
                .map(|(p, g)| {
                    Ok((
                        avg_haversine(p, g, k)?,
                        dtw_haversine(p, g, k)?,
                        sequence_accuracy(p, g, k)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut report = MetricReport::new("hmp", pairs.len());
            report.k = Some(k);
            report.insert(H_DIST, stable_mean(per_pair.iter().map(|m| m.0).collect()));
            report.insert(DTW_DIST, stable_mean(per_pair.iter().map(|m| m.1).collect()));
            report.insert(SEQ_ACC, stable_mean(per_pair.iter().map(|m| m.2).collect()));
            Ok(report)
        })
        .collect()
}

/// One metric row of a results table; displayed value is `value / 10^exp`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowSpec {
    pub label: &'static str,
    pub key: &'static str,
    pub exp: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableLayout {
    pub task: &'static str,
    pub rows: Vec<RowSpec>,
    /// Rows are repeated for each horizon `k`.
    pub per_k: bool,
}

const fn row(label: &'static str, key: &'static str, exp: i32) -> RowSpec {
    RowSpec { label, key, exp }
}

/// Table layout for `strpp`, `hpp`, `cap`, `tte` or `hmp`.
pub fn layout_for(task: &str) -> Option<TableLayout> {
    let (rows, per_k) = match task {
        "strpp" => (
            vec![
                row("MSE ×10^2", "mse", 2),
                row("RMSE", "rmse", 0),
                row("MAE", "mae", 0),
                row("MAPE", "mape", 0),
                row("sMAPE", "smape", 0),
            ],
            false,
        ),
        "hpp" => (
            vec![
                row("MSE ×10^9", "mse", 9),
                row("RMSE ×10^4", "rmse", 4),
                row("MAE ×10^4", "mae", 4),
                row("MAPE", "mape", 0),
                row("sMAPE", "smape", 0),
            ],
            false,
        ),
        "cap" => (
            vec![
                row("MSE ×10^-3", "mse", -3),
                row("RMSE ×10^-2", "rmse", -2),
                row("MAE ×10^-3", "mae", -3),
                row("R2", "r2", 0),
            ],
            false,
        ),
        "tte" => (
            vec![
                row("MSE ×10^5", "mse", 5),
                row("RMSE ×10^3", "rmse", 3),
                row("MAE ×10^2", "mae", 2),
                row("MAPE", "mape", 0),
            ],
            false,
        ),
        "hmp" => (
            vec![
                row("H Dist. [m]", H_DIST, 0),
                row("DTW Dist. [m]", DTW_DIST, 0),
                row("Seq Acc [%]", SEQ_ACC, 0),
            ],
            true,
        ),
        _ => return None,
    };
    let task = ["strpp", "hpp", "cap", "tte", "hmp"]
        .into_iter()
        .find(|t| *t == task)?;
    Some(TableLayout { task, rows, per_k })
}

/// A results column: `group` is the block header (e.g. "Res 9"), `name` the
/// embedder. For per-k layouts `reports` holds one report per horizon.
#[derive(Clone, Debug)]
pub struct TableColumn {
    pub group: String,
    pub name: String,
    pub reports: Vec<MetricReport>,
}

fn fmt_cell(v: Option<f64>, exp: i32) -> String {
    match v {
        Some(v) => format!("{:.3}", v / 10f64.powi(exp)),
        None => "–".to_string(),
    }
}

/// Markdown table with metric rows and one column per (group, embedder).
pub fn markdown_table(layout: &TableLayout, columns: &[TableColumn]) -> String {
    let mut out = String::new();
    let mut header = String::from("| Metric |");
    let mut rule = String::from("|---|");
    for c in columns {
        let _ = write!(header, " {} {} |", c.group, c.name);
        rule.push_str("---:|");
    }
    if layout.per_k {
        header.push_str(" k |");
        rule.push_str("---:|");
    }
    let _ = writeln!(out, "{header}");
    let _ = writeln!(out, "{rule}");
    let ks: Vec<Option<usize>> = if layout.per_k {
        let mut ks: Vec<usize> = columns
            .iter()
            .flat_map(|c| c.reports.iter().filter_map(|r| r.k))
            .collect();
        ks.sort_unstable();
        ks.dedup();
        ks.into_iter().map(Some).collect()
    } else {
        vec![None]
    };
    for k in ks {
        for spec in &layout.rows {
            let mut line = format!("| {} |", spec.label);
            for c in columns {
                let report = c.reports.iter().find(|r| r.k == k || (k.is_none() && r.k.is_none()));
                let _ = write!(line, " {} |", fmt_cell(report.and_then(|r| r.get(spec.key)), spec.exp));
            }
            if let Some(k) = k {
                let _ = write!(line, " {k} |");
            }
            let _ = writeln!(out, "{line}");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn single_pair_fixture() {
        let r = regression_metrics(&[100.0], &[50.0]).unwrap();
        assert_eq!(r.get("mse"), Some(2500.0));
        assert_eq!(r.get("rmse"), Some(50.0));
        assert_eq!(r.get("mae"), Some(50.0));
        assert_eq!(r.get("mape"), Some(50.0));
        assert!(close(r.get("smape").unwrap(), 200.0 / 3.0, 1e-9));
    }

    #[test]
    fn zero_targets_excluded_from_mape() {
        let r = regression_metrics(&[0.0, 10.0], &[0.0, 20.0]).unwrap();
        assert!(close(r.get("mape").unwrap(), 100.0, 1e-9));
        assert!(close(r.get("smape").unwrap(), 100.0 / 3.0, 1e-9));
        assert_eq!(r.counts["mape_excluded"], 1);
        let r = regression_metrics(&[0.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(r.get("mape"), None);
        assert_eq!(r.get("smape"), Some(100.0));
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let y = [1.0, -2.0, 3.5];
        let r = regression_metrics(&y, &y).unwrap();
        assert!(r.entries.values().all(|&v| v == 0.0));
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
    }

    #[test]
    fn r2_fixtures() {
        assert_eq!(r2(&[0.0, 1.0], &[1.0, 0.0]).unwrap(), -3.0);
        assert_eq!(r2(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap(), 0.0);
        assert_eq!(r2(&[1.0, 1.0], &[1.0, 1.0]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn length_mismatch() {
        assert_eq!(
            regression_metrics(&[1.0], &[1.0, 2.0]).unwrap_err(),
            MetricError::LengthMismatch(1, 2)
        );
    }

    #[test]
    fn one_degree_of_longitude_on_equator() {
        let a = GeoPoint::new(0.0, 0.0).unwrap();
        let b = GeoPoint::new(0.0, 1.0).unwrap();
        let d = haversine(a, b);
        assert!((d - 111_195.0).abs() / 111_195.0 < 1e-3);
        assert!(close(d, std::f64::consts::PI * EARTH_RADIUS_M / 180.0, 1e-6));
        assert_eq!(haversine(a, a), 0.0);
    }

    #[test]
    fn dtw_small_cases() {
        let cost = |a: f64, b: f64| (a - b).abs();
        assert_eq!(dtw(&[1.0], &[4.0], cost), 3.0);
        assert_eq!(dtw(&[1.0, 2.0, 3.0], &[1.0, 2.0, 2.0, 3.0], cost), 0.0);
        assert_eq!(dtw(&[0.0, 0.0], &[1.0], cost), 2.0);
    }

    #[test]
    fn sequence_metrics_on_cells() {
        let c: CellId = "8928308280fffff".parse().unwrap();
        let ring = c.ring(1).unwrap();
        let gold = vec![c, ring[0], ring[1]];
        let pred = vec![c, ring[0], ring[3]];
        assert!(close(sequence_accuracy(&pred, &gold, 3).unwrap(), 200.0 / 3.0, 1e-9));
        assert_eq!(sequence_accuracy(&gold, &gold, 10).unwrap(), 100.0);
        assert_eq!(avg_haversine(&gold, &gold, 3).unwrap(), 0.0);
        let first = avg_haversine(&[ring[2]], &[c], 1).unwrap();
        assert_eq!(first, haversine(ring[2].centroid(), c.centroid()));
        assert_eq!(dtw_haversine(&[ring[2]], &[c], 1).unwrap(), first);
        assert_eq!(avg_haversine(&[], &gold, 1), Err(MetricError::EmptySequence));
    }

    #[test]
    fn layouts_cover_all_tasks() {
        for t in ["strpp", "hpp", "cap", "tte", "hmp"] {
            assert_eq!(layout_for(t).unwrap().task, t);
        }
        assert!(layout_for("x").is_none());
        let mut r = MetricReport::new("strpp", 3);
        r.insert("mse", 1234.0);
        let table = markdown_table(
            &layout_for("strpp").unwrap(),
            &[TableColumn {
                group: "Res 9".into(),
                name: "CE".into(),
                reports: vec![r],
            }],
        );
        assert!(table.contains("| MSE ×10^2 | 12.340 |"));
        assert!(table.contains("| MAPE | – |"));
    }
}
