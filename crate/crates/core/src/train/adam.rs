use std::collections::BTreeMap;

use crate::error::{PrmError, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor2<T>>,
    pub v: BTreeMap<String, Tensor2<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.98;
    pub const EPS: f64 = 1e-9;

    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_hyper(params, Self::BETA1, Self::BETA2, Self::EPS)
    }

    pub fn with_hyper(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, t)| (k.clone(), Tensor2::zeros(t.rows(), t.cols())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// Bias-corrected Adam update in place. Non-finite gradients abort before any
/// tensor is touched.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor2<T>>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let next = state.step + 1;
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(PrmError::NonFinite {
                step: next,
                tensor: name.clone(),
            });
        }
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(PrmError::Dimension {
                op: "adam_step",
                lhs: p.shape(),
                rhs: g.shape(),
            });
        }
    }
    state.step = next;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(next as i32);
    let c2 = 1.0 - b2.powi(next as i32);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state.m.get_mut(name).ok_or_else(|| PrmError::Checkpoint(format!("no moment for `{name}`")))?;
        let v = state.v.get_mut(name).ok_or_else(|| PrmError::Checkpoint(format!("no moment for `{name}`")))?;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gf = gi.to_f64_lossy();
            let mf = b1 * mi.to_f64_lossy() + (1.0 - b1) * gf;
            let vf = b2 * vi.to_f64_lossy() + (1.0 - b2) * gf * gf;
            *mi = T::of(mf);
            *vi = T::of(vf);
            let upd = lr * (mf / c1) / ((vf / c2).sqrt() + state.eps);
            *pi = T::of(pi.to_f64_lossy() - upd);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut BTreeMap<String, Tensor2<T>>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
