//! Multi-head scaled dot-product attention.
//!
//! Inputs are batches of equally long (padded) sequences stacked sample-major:
//! row `b * seq_len + t` holds position `t` of sample `b`.

use rand::Rng;

use crate::error::{NnError, Result};
use crate::layers::{softmax_in_place, Dense};
use crate::params::ParamStore;
use crate::tensor::{dot, Tensor2};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub n_heads: usize,
    pub dim: usize,
    /// Position `t` attends only to positions `≤ t`.
    pub causal: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    xq: Tensor2,
    xk: Tensor2,
    xv: Tensor2,
    q: Tensor2,
    k: Tensor2,
    v: Tensor2,
    /// Attention weights, one `seq_len × seq_len` matrix per (sample, head).
    weights: Vec<Tensor2>,
    concat: Tensor2,
    seq_len: usize,
}

impl AttentionCache {
    /// Attention weights of `(sample, head)`.
    pub fn weights(&self, sample: usize, head: usize, n_heads: usize) -> &Tensor2 {
        &self.weights[sample * n_heads + head]
    }
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        n_heads: usize,
        causal: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(NnError::DimNotDivisible {
                dim,
                heads: n_heads,
            });
        }
        Ok(Self {
            q: Dense::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Dense::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Dense::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Dense::new(store, &format!("{name}.o"), dim, dim, rng),
            n_heads,
            dim,
            causal,
        })
    }

    pub fn bind(store: &ParamStore, name: &str, n_heads: usize, causal: bool) -> Result<Self> {
        let q = Dense::bind(store, &format!("{name}.q"))?;
        let dim = q.in_dim;
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(NnError::DimNotDivisible {
                dim,
                heads: n_heads,
            });
        }
        Ok(Self {
            q,
            k: Dense::bind(store, &format!("{name}.k"))?,
            v: Dense::bind(store, &format!("{name}.v"))?,
            out: Dense::bind(store, &format!("{name}.o"))?,
            n_heads,
            dim,
            causal,
        })
    }

    /// Self-attention over `x`.
    pub fn forward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        seq_len: usize,
        lengths: Option<&[usize]>,
    ) -> Result<(Tensor2, AttentionCache)> {
        self.forward_qkv(store, x, x, x, seq_len, lengths)
    }

    /// Attention with separate query, key and value inputs. `lengths` masks keys at
    /// positions `≥ lengths[b]` for sample `b`.
    pub fn forward_qkv(
        &self,
        store: &ParamStore,
        xq: &Tensor2,
        xk: &Tensor2,
        xv: &Tensor2,
        seq_len: usize,
        lengths: Option<&[usize]>,
    ) -> Result<(Tensor2, AttentionCache)> {
        if seq_len == 0 || xq.rows() % seq_len != 0 {
            return Err(NnError::ShapeMismatch {
                op: "attention seq_len",
                left: xq.shape(),
                right: (seq_len, 0),
            });
        }
        if xk.shape() != xq.shape() || xv.shape() != xq.shape() {
            return Err(NnError::ShapeMismatch {
                op: "attention q/k/v",
                left: xq.shape(),
                right: xk.shape(),
            });
        }
        let batch = xq.rows() / seq_len;
        let q = self.q.forward(store, xq)?;
        let k = self.k.forward(store, xk)?;
        let v = self.v.forward(store, xv)?;
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut concat = Tensor2::zeros(xq.rows(), self.dim);
        let mut weights = Vec::with_capacity(batch * self.n_heads);
        for b in 0..batch {
            let valid = lengths.map_or(seq_len, |l| l[b].clamp(1, seq_len));
            for h in 0..self.n_heads {
                let off = h * dh;
                let mut a = Tensor2::zeros(seq_len, seq_len);
                for i in 0..seq_len {
                    let qi = &q.row(b * seq_len + i)[off..off + dh];
                    let row = a.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = if j >= valid || (self.causal && j > i) {
                            f64::NEG_INFINITY
                        } else {
                            dot(qi, &k.row(b * seq_len + j)[off..off + dh]) * scale
                        };
                    }
                    softmax_in_place(row);
                }
                for i in 0..seq_len {
                    let out = &mut concat.row_mut(b * seq_len + i)[off..off + dh];
                    for j in 0..seq_len {
                        let w = a.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let vj = &v.row(b * seq_len + j)[off..off + dh];
                        for (o, vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
                weights.push(a);
            }
        }
        let y = self.out.forward(store, &concat)?;
        let cache = AttentionCache {
            xq: xq.clone(),
            xk: xk.clone(),
            xv: xv.clone(),
            q,
            k,
            v,
            weights,
            concat,
            seq_len,
        };
        Ok((y, cache))
    }

    /// Returns `(dxq, dxk, dxv)` and accumulates projection gradients.
    pub fn backward_qkv(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        dy: &Tensor2,
    ) -> Result<(Tensor2, Tensor2, Tensor2)> {
        let seq_len = cache.seq_len;
        let batch = cache.q.rows() / seq_len;
        let dh = self.dim / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.out.backward(store, &cache.concat, dy)?;
        let rows = cache.q.rows();
        let mut dq = Tensor2::zeros(rows, self.dim);
        let mut dk = Tensor2::zeros(rows, self.dim);
        let mut dv = Tensor2::zeros(rows, self.dim);
        let mut da = vec![0.0; seq_len];
        for b in 0..batch {
            for h in 0..self.n_heads {
                let off = h * dh;
                let a = &cache.weights[b * self.n_heads + h];
                for i in 0..seq_len {
                    let doi = &dconcat.row(b * seq_len + i)[off..off + dh];
                    // dA[i, j] = dO_i · v_j ; dV_j += A[i, j] dO_i
                    for j in 0..seq_len {
                        let w = a.get(i, j);
                        if w == 0.0 {
                            da[j] = 0.0;
                            continue;
                        }
                        da[j] = dot(doi, &cache.v.row(b * seq_len + j)[off..off + dh]);
                        let dvj = &mut dv.row_mut(b * seq_len + j)[off..off + dh];
                        for (d, g) in dvj.iter_mut().zip(doi) {
                            *d += w * g;
                        }
                    }
                    let inner: f64 = (0..seq_len).map(|j| a.get(i, j) * da[j]).sum();
                    for j in 0..seq_len {
                        let w = a.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let ds = w * (da[j] - inner) * scale;
                        let kj = cache.k.row(b * seq_len + j)[off..off + dh].to_vec();
                        let qi = cache.q.row(b * seq_len + i)[off..off + dh].to_vec();
                        for (d, kv) in dq.row_mut(b * seq_len + i)[off..off + dh]
                            .iter_mut()
                            .zip(&kj)
                        {
                            *d += ds * kv;
                        }
                        for (d, qv) in dk.row_mut(b * seq_len + j)[off..off + dh]
                            .iter_mut()
                            .zip(&qi)
                        {
                            *d += ds * qv;
                        }
                    }
                }
            }
        }
        let dxq = self.q.backward(store, &cache.xq, &dq)?;
        let dxk = self.k.backward(store, &cache.xk, &dk)?;
        let dxv = self.v.backward(store, &cache.xv, &dv)?;
        Ok((dxq, dxk, dxv))
    }

    /// Backward for [`Self::forward`]: the three input gradients summed.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &AttentionCache,
        dy: &Tensor2,
    ) -> Result<Tensor2> {
        let (mut dx, dxk, dxv) = self.backward_qkv(store, cache, dy)?;
        dx.add_assign(&dxk)?;
        dx.add_assign(&dxv)?;
        Ok(dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::dense_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            MultiHeadAttention::new(&mut store, "a", 6, 4, false, &mut rng).unwrap_err(),
            NnError::DimNotDivisible { dim: 6, heads: 4 }
        );
    }

    #[test]
    fn single_position_returns_projected_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 2, false, &mut rng).unwrap();
        let x = Tensor2::from_fn(3, 4, |r, c| (r as f64 + 1.0) * 0.3 - c as f64 * 0.2);
        let (y, _) = att.forward(&store, &x, 1, None).unwrap();
        let v = att.v.forward(&store, &x).unwrap();
        let expected = dense_forward(&v, store.value(att.out.w), store.value(att.out.b)).unwrap();
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_attend_uniformly() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 2, false, &mut rng).unwrap();
        let xq = Tensor2::from_fn(5, 4, |r, c| (r * 3 + c) as f64 * 0.1);
        let xk = Tensor2::from_fn(5, 4, |_, c| c as f64 * 0.4 - 0.5);
        let (_, cache) = att.forward_qkv(&store, &xq, &xk, &xq, 5, None).unwrap();
        for h in 0..2 {
            let w = cache.weights(0, h, 2);
            assert!(w.data().iter().all(|&v| (v - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn causal_and_length_masks() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let att = MultiHeadAttention::new(&mut store, "a", 4, 1, true, &mut rng).unwrap();
        let x = Tensor2::from_fn(8, 4, |r, c| ((r * 7 + c * 3) % 5) as f64 * 0.3);
        let (_, cache) = att.forward(&store, &x, 4, Some(&[4, 2])).unwrap();
        let w0 = cache.weights(0, 0, 1);
        for i in 0..4 {
            assert!((w0.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w0.row(i)[i + 1..].iter().all(|&v| v == 0.0));
        }
        let w1 = cache.weights(1, 0, 1);
        assert!(w1.row(3)[2..].iter().all(|&v| v == 0.0));
    }
}
