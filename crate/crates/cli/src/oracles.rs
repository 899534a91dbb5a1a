//! Slow, obviously-correct reference computations the self-test compares the
//! fast implementations against.

use std::collections::{BTreeMap, VecDeque};

use obsr_core::hexgrid::{CellId, DirectionLabel, GeoPoint};
use obsr_core::metrics::haversine;

/// Grid distance of every cell within `k` single steps of `origin`.
pub fn bfs(origin: CellId, k: u32) -> BTreeMap<CellId, u32> {
    let mut dist = BTreeMap::from([(origin, 0)]);
    let mut queue = VecDeque::from([origin]);
    while let Some(c) = queue.pop_front() {
        let d = dist[&c];
        if d == k {
            continue;
        }
        for dir in DirectionLabel::all() {
            let Ok(n) = c.neighbor(dir) else { continue };
            dist.entry(n).or_insert_with(|| {
                queue.push_back(n);
                d + 1
            });
        }
    }
    dist
}

/// DTW by plain recursion over every alignment; exponential, so keep inputs tiny.
pub fn dtw_recursive(a: &[GeoPoint], b: &[GeoPoint]) -> f64 {
    fn go(a: &[GeoPoint], b: &[GeoPoint], i: usize, j: usize) -> f64 {
        let d = haversine(a[i], b[j]);
        match (i, j) {
            (0, 0) => d,
            (0, _) => d + go(a, b, 0, j - 1),
            (_, 0) => d + go(a, b, i - 1, 0),
            _ => d + go(a, b, i - 1, j).min(go(a, b, i, j - 1)).min(go(a, b, i - 1, j - 1)),
        }
    }
    go(a, b, a.len() - 1, b.len() - 1)
}

/// Ordinary least squares with intercept via the normal equations.
/// Returns `[w_0, …, w_{d-1}, intercept]`.
pub fn least_squares(x: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let d = x.first()?.len() + 1;
    let mut a = vec![vec![0.0; d + 1]; d];
    for (row, &t) in x.iter().zip(y) {
        let z: Vec<f64> = row.iter().copied().chain([1.0]).collect();
        for i in 0..d {
            for j in 0..d {
                a[i][j] += z[i] * z[j];
            }
            a[i][d] += z[i] * t;
        }
    }
    // Gauss-Jordan with partial pivoting.
    for col in 0..d {
        let piv = (col..d).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=d {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..d).map(|i| a[i][d] / a[i][i]).collect())
}

pub fn predict_linear(w: &[f64], x: &[f64]) -> f64 {
    x.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + w[w.len() - 1]
}

pub fn rmse(y: &[f64], yhat: &[f64]) -> f64 {
    (y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt()
}

pub fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Median by full sort, averaging the middle pair for even lengths.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Earth mover's distance between two histograms on the same equal-width bins,
/// each normalized to unit mass: `Σ |F_a − F_b| · width`.
pub fn wasserstein_hist(a: &[u64], b: &[u64], width: f64) -> f64 {
    let (ta, tb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let (mut fa, mut fb, mut w) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        fa += *x as f64 / ta;
        fb += *y as f64 / tb;
        w += (fa - fb).abs() * width;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn least_squares_recovers_exact_plane() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i % 7) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 2.0 * r[0] - 3.0 * r[1] + 0.5).collect();
        let w = least_squares(&x, &y).unwrap();
        for (a, b) in w.iter().zip([2.0, -3.0, 0.5]) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn wasserstein_of_shifted_spike_is_shift() {
        assert!((wasserstein_hist(&[1, 0, 0], &[0, 0, 1], 0.5) - 1.0).abs() < 1e-12);
        assert_eq!(wasserstein_hist(&[3, 1], &[6, 2], 1.0), 0.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
