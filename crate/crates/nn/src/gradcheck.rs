//! Central finite-difference verification of analytic gradients.

use crate::error::{NnError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Denominator floor so that exactly-zero gradients compare absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// Compares analytic gradients against central differences for every scalar in `store`.
///
/// `loss_fn` must compute the loss from the current parameter values and accumulate
/// its analytic gradients into the (already zeroed) store.
pub fn grad_check<F>(store: &mut ParamStore, mut loss_fn: F, cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore) -> Result<f64>,
{
    store.zero_grads();
    let first = loss_fn(store)?;
    let analytic: Vec<Vec<f64>> = store.params().iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grads();
    let second = loss_fn(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NnError::NonDeterministicModel { first, second });
    }
    let mut checks = Vec::with_capacity(store.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (i, &a) in grads.iter().enumerate() {
            let orig = store.params()[pi].value.data()[i];
            store.params_mut()[pi].value.data_mut()[i] = orig + cfg.h;
            store.zero_grads();
            let plus = loss_fn(store)?;
            store.params_mut()[pi].value.data_mut()[i] = orig - cfg.h;
            store.zero_grads();
            let minus = loss_fn(store)?;
            store.params_mut()[pi].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        checks.push(ParamCheck {
            name: store.params()[pi].name.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    store.zero_grads();
    Ok(GradCheckReport {
        params: checks,
        tol: cfg.tol,
    })
}
