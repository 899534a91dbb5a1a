//! Dense layers, pointwise activations and inverted dropout.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor2;

/// Gradients of `y = xW + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub dw: Tensor2,
    pub db: Tensor2,
    pub dx: Tensor2,
}

pub fn dense_forward(x: &Tensor2, w: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let mut y = x.matmul(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

pub fn dense_backward(x: &Tensor2, w: &Tensor2, dy: &Tensor2) -> Result<DenseGrads> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(NnError::ShapeMismatch {
            op: "dense_backward",
            left: dy.shape(),
            right: (x.rows(), w.cols()),
        });
    }
    Ok(DenseGrads {
        dw: x.matmul_tn(dy)?,
        db: dy.sum_rows(),
        dx: dy.matmul_nt(w)?,
    })
}

/// Fully connected layer whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), in_dim, out_dim, rng);
        let b = store.add(format!("{name}.b"), Tensor2::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Re-attaches a layer to parameters already present in `store`.
    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store.find(&format!("{name}.w"))?;
        let b = store.find(&format!("{name}.b"))?;
        let (in_dim, out_dim) = store.value(w).shape();
        Ok(Self {
            w,
            b,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Result<Tensor2> {
        dense_forward(x, store.value(self.w), store.value(self.b))
    }

    /// Accumulates parameter gradients and returns `dx`.
    pub fn backward(&self, store: &mut ParamStore, x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
        let g = dense_backward(x, store.value(self.w), dy)?;
        store.accumulate_grad(self.w, &g.dw)?;
        store.accumulate_grad(self.b, &g.db)?;
        Ok(g.dx)
    }
}

pub fn relu(x: &Tensor2) -> Tensor2 {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(x: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    x.zip_map(dy, |xv, g| if xv > 0.0 { g } else { 0.0 })
}

#[inline]
pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor2) -> Tensor2 {
    x.map(sigmoid_scalar)
}

/// Backward through sigmoid given its output `y`.
pub fn sigmoid_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    y.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn tanh(x: &Tensor2) -> Tensor2 {
    x.map(f64::tanh)
}

/// Backward through tanh given its output `y`.
pub fn tanh_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    y.zip_map(dy, |t, g| g * (1.0 - t * t))
}

/// Inverted dropout. Returns the output and, in training mode, the scaled keep-mask
/// that the backward pass multiplies into the upstream gradient.
pub fn dropout<R: Rng>(
    x: &Tensor2,
    p: f64,
    training: bool,
    rng: &mut R,
) -> Result<(Tensor2, Option<Tensor2>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(NnError::InvalidConfig(format!("dropout p must be in [0,1), got {p}")));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - p);
    let mask = Tensor2::from_fn(x.rows(), x.cols(), |_, _| {
        if rng.gen::<f64>() < p {
            0.0
        } else {
            scale
        }
    });
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward(mask: Option<&Tensor2>, dy: &Tensor2) -> Result<Tensor2> {
    match mask {
        Some(m) => dy.zip_map(m, |g, k| g * k),
        None => Ok(dy.clone()),
    }
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: &Tensor2) -> Tensor2 {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_dense_is_identity() {
        let x = Tensor2::from_fn(3, 4, |r, c| (r as f64) - 0.5 * c as f64);
        let y = dense_forward(&x, &Tensor2::identity(4), &Tensor2::zeros(1, 4)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_dense_by_hand() {
        let x = Tensor2::from_vec(1, 1, vec![2.0]).unwrap();
        let w = Tensor2::from_vec(1, 1, vec![3.0]).unwrap();
        let b = Tensor2::from_vec(1, 1, vec![1.0]).unwrap();
        assert_eq!(dense_forward(&x, &w, &b).unwrap().get(0, 0), 7.0);
        let g = dense_backward(&x, &w, &Tensor2::filled(1, 1, 1.0)).unwrap();
        assert_eq!(g.dw.get(0, 0), 2.0);
        assert_eq!(g.db.get(0, 0), 1.0);
        assert_eq!(g.dx.get(0, 0), 3.0);
    }

    #[test]
    fn activation_values() {
        let x = Tensor2::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid(&x).get(0, 1), 0.5);
        let s = sigmoid(&Tensor2::from_vec(1, 2, vec![-800.0, 800.0]).unwrap());
        assert!(s.get(0, 0) >= 0.0 && s.get(0, 1) <= 1.0 && s.is_finite());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor2::filled(10, 10, 1.5);
        assert_eq!(dropout(&x, 0.0, true, &mut rng).unwrap().0, x);
        assert_eq!(dropout(&x, 0.7, false, &mut rng).unwrap().0, x);
        assert!(dropout(&x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_rate_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = 0.2;
        let x = Tensor2::filled(1000, 100, 1.0);
        let (y, _) = dropout(&x, p, true, &mut rng).unwrap();
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / y.len() as f64;
        assert!((zeros - p).abs() < 0.01, "zero rate {zeros}");
        let survivors: Vec<_> = y.data().iter().filter(|&&v| v != 0.0).collect();
        assert!(survivors.iter().all(|&&v| (v - 1.0 / (1.0 - p)).abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor2::from_fn(5, 6, |r, c| (r * 31 + c * 17) as f64 % 11.0 - 5.0);
        let s = softmax_rows(&x);
        for r in 0..5 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(s.row(r).iter().all(|&v| v >= 0.0));
        }
    }
}
