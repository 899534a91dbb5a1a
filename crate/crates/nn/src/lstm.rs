//! LSTM cells with full backpropagation through time.
//!
//! Gate pre-activations are packed as `[i | f | g | o]` along the columns of
//! `z = x·Wx + h·Wh + b`, each block `hidden` wide:
//!
//! ```text
//! c' = σ(f)·c + σ(i)·tanh(g)
//! h' = σ(o)·tanh(c')
//! ```

use rand::Rng;

use crate::error::{NnError, Result};
use crate::layers::sigmoid_scalar;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor2;

/// Everything the backward pass of one step needs.
#[derive(Clone, Debug)]
pub struct LstmStepCache {
    x: Tensor2,
    h_prev: Tensor2,
    c_prev: Tensor2,
    /// Activated gates `[i | f | g | o]`.
    gates: Tensor2,
    tanh_c: Tensor2,
}

/// Pure single-step LSTM update. Returns `(h', c')`.
pub fn lstm_step(
    x: &Tensor2,
    h: &Tensor2,
    c: &Tensor2,
    wx: &Tensor2,
    wh: &Tensor2,
    b: &Tensor2,
) -> Result<(Tensor2, Tensor2)> {
    let (h, c, _) = step_impl(x, h, c, wx, wh, b)?;
    Ok((h, c))
}

fn step_impl(
    x: &Tensor2,
    h: &Tensor2,
    c: &Tensor2,
    wx: &Tensor2,
    wh: &Tensor2,
    b: &Tensor2,
) -> Result<(Tensor2, Tensor2, LstmStepCache)> {
    let hidden = wh.rows();
    if wx.cols() != 4 * hidden || wh.cols() != 4 * hidden || b.shape() != (1, 4 * hidden) {
        return Err(NnError::ShapeMismatch {
            op: "lstm_step weights",
            left: wx.shape(),
            right: wh.shape(),
        });
    }
    if h.shape() != (x.rows(), hidden) || c.shape() != h.shape() {
        return Err(NnError::ShapeMismatch {
            op: "lstm_step state",
            left: h.shape(),
            right: c.shape(),
        });
    }
    let mut z = x.matmul(wx)?;
    z.add_assign(&h.matmul(wh)?)?;
    z.add_row_vector(b)?;
    let batch = x.rows();
    let mut h_new = Tensor2::zeros(batch, hidden);
    let mut c_new = Tensor2::zeros(batch, hidden);
    let mut tanh_c = Tensor2::zeros(batch, hidden);
    for r in 0..batch {
        let zr = z.row_mut(r);
        for j in 0..hidden {
            zr[j] = sigmoid_scalar(zr[j]);
            zr[hidden + j] = sigmoid_scalar(zr[hidden + j]);
            zr[2 * hidden + j] = zr[2 * hidden + j].tanh();
            zr[3 * hidden + j] = sigmoid_scalar(zr[3 * hidden + j]);
        }
        let cp = c.row(r);
        let zr = z.row(r);
        let cn = c_new.row_mut(r);
        for j in 0..hidden {
            cn[j] = zr[hidden + j] * cp[j] + zr[j] * zr[2 * hidden + j];
        }
        let tc = tanh_c.row_mut(r);
        for j in 0..hidden {
            tc[j] = c_new.get(r, j).tanh();
        }
        let hn = h_new.row_mut(r);
        for j in 0..hidden {
            hn[j] = zr[3 * hidden + j] * tanh_c.get(r, j);
        }
    }
    let cache = LstmStepCache {
        x: x.clone(),
        h_prev: h.clone(),
        c_prev: c.clone(),
        gates: z,
        tanh_c,
    };
    Ok((h_new, c_new, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LstmLayer {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    /// Glorot-initialized weights, zero biases except the forget gate at 1.0.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let wx = store.add_xavier(format!("{name}.wx"), input, 4 * hidden, rng);
        let wh = store.add_xavier(format!("{name}.wh"), hidden, 4 * hidden, rng);
        let b = Tensor2::from_fn(1, 4 * hidden, |_, c| {
            if (hidden..2 * hidden).contains(&c) {
                1.0
            } else {
                0.0
            }
        });
        let b = store.add(format!("{name}.b"), b);
        Self {
            wx,
            wh,
            b,
            input,
            hidden,
        }
    }

    pub fn bind(store: &ParamStore, name: &str) -> Result<Self> {
        let wx = store.find(&format!("{name}.wx"))?;
        let wh = store.find(&format!("{name}.wh"))?;
        let b = store.find(&format!("{name}.b"))?;
        Ok(Self {
            wx,
            wh,
            b,
            input: store.value(wx).rows(),
            hidden: store.value(wh).rows(),
        })
    }

    pub fn step(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        h: &Tensor2,
        c: &Tensor2,
    ) -> Result<(Tensor2, Tensor2, LstmStepCache)> {
        step_impl(
            x,
            h,
            c,
            store.value(self.wx),
            store.value(self.wh),
            store.value(self.b),
        )
    }

    /// Given `dL/dh'` and `dL/dc'`, accumulates weight gradients and returns
    /// `(dL/dx, dL/dh, dL/dc)`.
    pub fn step_backward(
        &self,
        store: &mut ParamStore,
        cache: &LstmStepCache,
        dh: &Tensor2,
        dc: &Tensor2,
    ) -> Result<(Tensor2, Tensor2, Tensor2)> {
        let hidden = self.hidden;
        let batch = dh.rows();
        let mut dz = Tensor2::zeros(batch, 4 * hidden);
        let mut dc_prev = Tensor2::zeros(batch, hidden);
        for r in 0..batch {
            let gates = cache.gates.row(r);
            let tc = cache.tanh_c.row(r);
            let cp = cache.c_prev.row(r);
            let dhr = dh.row(r);
            let dcr = dc.row(r);
            let dzr = dz.row_mut(r);
            for j in 0..hidden {
                let (i, f, g, o) = (
                    gates[j],
                    gates[hidden + j],
                    gates[2 * hidden + j],
                    gates[3 * hidden + j],
                );
                let dct = dcr[j] + dhr[j] * o * (1.0 - tc[j] * tc[j]);
                dzr[j] = dct * g * i * (1.0 - i);
                dzr[hidden + j] = dct * cp[j] * f * (1.0 - f);
                dzr[2 * hidden + j] = dct * i * (1.0 - g * g);
                dzr[3 * hidden + j] = dhr[j] * tc[j] * o * (1.0 - o);
            }
            let dcp = dc_prev.row_mut(r);
            for j in 0..hidden {
                let o = gates[3 * hidden + j];
                let dct = dcr[j] + dhr[j] * o * (1.0 - tc[j] * tc[j]);
                dcp[j] = dct * gates[hidden + j];
            }
        }
        cache.x.matmul_tn_into(&dz, store.grad_mut(self.wx))?;
        cache.h_prev.matmul_tn_into(&dz, store.grad_mut(self.wh))?;
        store.accumulate_grad(self.b, &dz.sum_rows())?;
        let dx = dz.matmul_nt(store.value(self.wx))?;
        let dh_prev = dz.matmul_nt(store.value(self.wh))?;
        Ok((dx, dh_prev, dc_prev))
    }
}

/// Stacked LSTM: each layer consumes the hidden states of the one below.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub layers: Vec<LstmLayer>,
}

/// Per-layer, per-timestep caches from [`Lstm::forward_seq`].
#[derive(Clone, Debug)]
pub struct LstmSeqCache {
    steps: Vec<Vec<LstmStepCache>>,
}

impl Lstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| {
                let in_dim = if l == 0 { input } else { hidden };
                LstmLayer::new(store, &format!("{name}.l{l}"), in_dim, hidden, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn bind(store: &ParamStore, name: &str, n_layers: usize) -> Result<Self> {
        let layers = (0..n_layers)
            .map(|l| LstmLayer::bind(store, &format!("{name}.l{l}")))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn hidden(&self) -> usize {
        self.layers.last().map_or(0, |l| l.hidden)
    }

    /// Runs the stack over `xs` (one `batch × input` matrix per timestep) from zero
    /// initial states and returns the top layer's hidden state at every step.
    pub fn forward_seq(
        &self,
        store: &ParamStore,
        xs: &[Tensor2],
    ) -> Result<(Vec<Tensor2>, LstmSeqCache)> {
        let mut inputs: Vec<Tensor2> = xs.to_vec();
        let mut steps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let batch = inputs.first().map_or(0, |x| x.rows());
            let mut h = Tensor2::zeros(batch, layer.hidden);
            let mut c = Tensor2::zeros(batch, layer.hidden);
            let mut caches = Vec::with_capacity(inputs.len());
            let mut outputs = Vec::with_capacity(inputs.len());
            for x in &inputs {
                let (h2, c2, cache) = layer.step(store, x, &h, &c)?;
                outputs.push(h2.clone());
                caches.push(cache);
                h = h2;
                c = c2;
            }
            steps.push(caches);
            inputs = outputs;
        }
        Ok((inputs, LstmSeqCache { steps }))
    }

    /// Backpropagates `d_outputs` (gradient w.r.t. every top-layer hidden state)
    /// and returns the gradient w.r.t. every input.
    pub fn backward_seq(
        &self,
        store: &mut ParamStore,
        cache: &LstmSeqCache,
        d_outputs: &[Tensor2],
    ) -> Result<Vec<Tensor2>> {
        let mut upstream: Vec<Tensor2> = d_outputs.to_vec();
        for (layer, caches) in self.layers.iter().zip(&cache.steps).rev() {
            let steps = caches.len();
            if upstream.len() != steps {
                return Err(NnError::ShapeMismatch {
                    op: "lstm backward_seq",
                    left: (upstream.len(), 0),
                    right: (steps, 0),
                });
            }
            let batch = upstream.first().map_or(0, |d| d.rows());
            let mut dh_next = Tensor2::zeros(batch, layer.hidden);
            let mut dc_next = Tensor2::zeros(batch, layer.hidden);
            let mut dxs = vec![Tensor2::zeros(0, 0); steps];
            for t in (0..steps).rev() {
                let mut dh = upstream[t].clone();
                dh.add_assign(&dh_next)?;
                let (dx, dh_prev, dc_prev) =
                    layer.step_backward(store, &caches[t], &dh, &dc_next)?;
                dxs[t] = dx;
                dh_next = dh_prev;
                dc_next = dc_prev;
            }
            upstream = dxs;
        }
        Ok(upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_by_hand() {
        let hidden = 3;
        let x = Tensor2::filled(1, 2, 0.7);
        let wx = Tensor2::zeros(2, 4 * hidden);
        let wh = Tensor2::zeros(hidden, 4 * hidden);
        let b = Tensor2::zeros(1, 4 * hidden);
        let zero = Tensor2::zeros(1, hidden);
        let (h, c) = lstm_step(&x, &zero, &zero, &wx, &wh, &b).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        assert!(c.data().iter().all(|&v| v == 0.0));

        // With c = 2: c' = σ(0)·2 + σ(0)·tanh(0) = 1, h' = σ(0)·tanh(1).
        let c0 = Tensor2::filled(1, hidden, 2.0);
        let (h, c) = lstm_step(&x, &zero, &c0, &wx, &wh, &b).unwrap();
        assert!(c.data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
        assert!(h.data().iter().all(|&v| (v - 0.5 * 1f64.tanh()).abs() < 1e-15));
    }

    #[test]
    fn single_step_sequence_matches_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "lstm", 4, 5, 1, &mut rng);
        let x = Tensor2::from_fn(2, 4, |r, c| (r as f64 - c as f64) * 0.2);
        let (outs, _) = lstm.forward_seq(&store, std::slice::from_ref(&x)).unwrap();
        let zero = Tensor2::zeros(2, 5);
        let (h, _, _) = lstm.layers[0].step(&store, &x, &zero, &zero).unwrap();
        assert_eq!(outs[0], h);
    }

    #[test]
    fn forget_bias_initialized_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let layer = LstmLayer::new(&mut store, "l", 2, 4, &mut rng);
        let b = store.value(layer.b);
        assert_eq!(&b.data()[4..8], &[1.0; 4]);
        assert!(b.data()[..4].iter().chain(&b.data()[8..]).all(|&v| v == 0.0));
    }
}
