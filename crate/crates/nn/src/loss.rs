//! Mean-reduced losses returning `(loss, d loss / d prediction)`.

use crate::error::{NnError, Result};
use crate::layers::softmax_in_place;
use crate::tensor::Tensor2;

/// Huber-style loss with transition point 1.0.
pub fn smooth_l1(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    check_shapes(pred, target, "smooth_l1")?;
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = pred.zip_map(target, |p, t| {
        let e = p - t;
        if e.abs() < 1.0 {
            e / n
        } else {
            e.signum() / n
        }
    })?;
    for (p, t) in pred.data().iter().zip(target.data()) {
        let e = p - t;
        loss += if e.abs() < 1.0 { 0.5 * e * e } else { e.abs() - 0.5 };
    }
    Ok((loss / n, grad))
}

pub fn l1(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    check_shapes(pred, target, "l1")?;
    let n = pred.len().max(1) as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / n;
    let grad = pred.zip_map(target, |p, t| {
        let e = p - t;
        if e == 0.0 {
            0.0
        } else {
            e.signum() / n
        }
    })?;
    Ok((loss, grad))
}

pub fn mse(pred: &Tensor2, target: &Tensor2) -> Result<(f64, Tensor2)> {
    check_shapes(pred, target, "mse")?;
    let n = pred.len().max(1) as f64;
    let loss = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let grad = pred.zip_map(target, |p, t| 2.0 * (p - t) / n)?;
    Ok((loss, grad))
}

/// `-log softmax(logits)[class]`, averaged over rows.
pub fn cross_entropy(logits: &Tensor2, classes: &[usize]) -> Result<(f64, Tensor2)> {
    let targets: Vec<Option<usize>> = classes.iter().copied().map(Some).collect();
    cross_entropy_masked(logits, &targets)
}

/// Cross-entropy over rows whose target is `Some`; masked rows get zero gradient.
pub fn cross_entropy_masked(logits: &Tensor2, targets: &[Option<usize>]) -> Result<(f64, Tensor2)> {
    hybrid_geo_loss(logits, targets, None, 0.0)
}

/// Expected cost under the row softmax, `Σ_j p_j · cost_j`, averaged over unmasked rows.
pub fn expected_cost(
    logits: &Tensor2,
    targets: &[Option<usize>],
    costs: &Tensor2,
) -> Result<(f64, Tensor2)> {
    hybrid_geo_loss(logits, targets, Some(costs), 1.0)
}

/// `(1 − w) · CE + w · E_softmax[cost]` averaged over rows with a target.
///
/// `costs` holds one row of candidate costs per logit row (for the mobility task,
/// `ln(1 + haversine)` from each candidate neighbor to the gold cell).
pub fn hybrid_geo_loss(
    logits: &Tensor2,
    targets: &[Option<usize>],
    costs: Option<&Tensor2>,
    geo_weight: f64,
) -> Result<(f64, Tensor2)> {
    if targets.len() != logits.rows() {
        return Err(NnError::ShapeMismatch {
            op: "hybrid_geo_loss",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    if let Some(c) = costs {
        check_shapes(logits, c, "hybrid_geo_loss costs")?;
    }
    if !(0.0..=1.0).contains(&geo_weight) {
        return Err(NnError::InvalidConfig(format!(
            "geo weight must be in [0,1], got {geo_weight}"
        )));
    }
    let n_classes = logits.cols();
    let n_valid = targets.iter().filter(|t| t.is_some()).count();
    let mut grad = Tensor2::zeros(logits.rows(), n_classes);
    if n_valid == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n_valid as f64;
    let ce_w = 1.0 - geo_weight;
    let mut loss = 0.0;
    let mut probs = vec![0.0; n_classes];
    for (r, target) in targets.iter().enumerate() {
        let Some(class) = *target else { continue };
        if class >= n_classes {
            return Err(NnError::ClassOutOfRange { class, n_classes });
        }
        let row = logits.row(r);
        probs.copy_from_slice(row);
        softmax_in_place(&mut probs);
        let g = grad.row_mut(r);
        if ce_w > 0.0 {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += ce_w * (lse - row[class]) * inv;
            for (j, gj) in g.iter_mut().enumerate() {
                let onehot = if j == class { 1.0 } else { 0.0 };
                *gj += ce_w * (probs[j] - onehot) * inv;
            }
        }
        if let (Some(c), true) = (costs, geo_weight > 0.0) {
            let cost = c.row(r);
            let expected: f64 = probs.iter().zip(cost).map(|(p, c)| p * c).sum();
            loss += geo_weight * expected * inv;
            for (j, gj) in g.iter_mut().enumerate() {
                *gj += geo_weight * probs[j] * (cost[j] - expected) * inv;
            }
        }
    }
    Ok((loss, grad))
}

fn check_shapes(a: &Tensor2, b: &Tensor2, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(NnError::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}
