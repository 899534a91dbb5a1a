use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tensor::Tensor2;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor2,
    pub grad: Tensor2,
    /// Adam first moment.
    pub m: Tensor2,
    /// Adam second moment.
    pub v: Tensor2,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Named parameters with aligned gradient and moment buffers.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
    step: u64,
    #[serde(skip)]
    grads_ready: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        ParamId(self.params.len() - 1)
    }

    /// Glorot-uniform initialized `rows × cols` tensor.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let t = Tensor2::from_fn(rows, cols, |_, _| rng.gen_range(-limit..limit));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Result<ParamId> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .map(ParamId)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, g: &Tensor2) -> Result<()> {
        self.params[id.0].grad.add_assign(g)?;
        self.grads_ready = true;
        Ok(())
    }

    /// Grants mutable access to a gradient buffer and marks gradients as populated.
    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        self.grads_ready = true;
        &mut self.params[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
        self.grads_ready = false;
    }

    /// Scales all accumulated gradients, e.g. to average over a batch.
    pub fn scale_grads(&mut self, s: f64) {
        for p in &mut self.params {
            p.grad.scale_in_place(s);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// One bias-corrected Adam update followed by zeroing the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if !self.grads_ready {
            return Err(NnError::UninitializedGrads);
        }
        if !(cfg.lr > 0.0) {
            return Err(NnError::InvalidConfig(format!("lr must be > 0, got {}", cfg.lr)));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let grads = p.grad.data();
            let m = p.m.data_mut();
            for (mi, &g) in m.iter_mut().zip(grads) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            }
            let v = p.v.data_mut();
            for (vi, &g) in v.iter_mut().zip(grads) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    pub(crate) fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor2::from_vec(1, 4, vec![0.0; 4]).unwrap());
        let g = Tensor2::from_vec(1, 4, vec![1e-3, -2.5, 40.0, -1e-2]).unwrap();
        store.accumulate_grad(id, &g).unwrap();
        let cfg = AdamConfig::with_lr(0.01);
        store.adam_step(&cfg).unwrap();
        for (w, gi) in store.value(id).data().iter().zip(g.data()) {
            let expected = -cfg.lr * gi.signum();
            assert!((w - expected).abs() < 1e-6 * cfg.lr.max(1.0), "{w} vs {expected}");
        }
        assert_eq!(store.step(), 1);
        assert!(store.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor2::from_vec(1, 3, vec![1.0, -2.0, 3.0]).unwrap());
        store.grad_mut(id);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn step_without_grads_errors() {
        let mut store = ParamStore::new();
        store.add("w", Tensor2::zeros(1, 1));
        assert_eq!(
            store.adam_step(&AdamConfig::default()),
            Err(NnError::UninitializedGrads)
        );
    }

    #[test]
    fn scalar_quadratic_converges() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor2::zeros(1, 1));
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..200 {
            let w = store.value(id).get(0, 0);
            store.grad_mut(id).set(0, 0, 2.0 * (w - 3.0));
            store.adam_step(&cfg).unwrap();
        }
        assert!((store.value(id).get(0, 0) - 3.0).abs() < 0.05);
    }
}
