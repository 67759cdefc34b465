//! Adam with bias correction, coupled (L2) weight decay and a step-decay
//! learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-3,
        }
    }
}

/// Learning rate multiplied by `factor` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base: f64,
    pub every: usize,
    pub factor: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule {
            base: 1e-5,
            every: 5,
            factor: 0.1,
        }
    }
}

impl StepSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        self.base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Moment estimates mirroring the parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Scalar = f32> {
    pub step: u64,
    pub lr: f64,
    pub m: ModelParams<Tensor<T>>,
    pub v: ModelParams<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(params: &ModelParams<Tensor<T>>, lr: f64) -> Self {
        let zeros = params.map(|t| Tensor::zeros(t.shape().to_vec()).expect("shape"));
        OptimState {
            step: 0,
            lr,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. Every gradient is checked before any parameter changes,
/// so a non-finite gradient leaves `params` and `state` untouched.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<Tensor<T>>,
    grads: &ModelParams<Tensor<T>>,
    state: &mut OptimState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    let p_entries = params.entries();
    let g_entries = grads.entries();
    if p_entries.len() != g_entries.len() {
        return Err(Error::Config("gradient layout does not match parameters".into()));
    }
    for ((name, p), (_, g)) in p_entries.iter().zip(&g_entries) {
        if p.shape() != g.shape() {
            return Err(Error::Tensor(crate::TensorError::mismatch(
                "adam_step",
                p.shape(),
                g.shape(),
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps, wd) = (T::lit(state.lr), T::lit(cfg.eps), T::lit(cfg.weight_decay));

    let mut ps = params.entries_mut();
    let mut ms = state.m.entries_mut();
    let mut vs = state.v.entries_mut();
    for (i, (_, g)) in g_entries.iter().enumerate() {
        let p = ps[i].1.data_mut();
        let m = ms[i].1.data_mut();
        let v = vs[i].1.data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k] + wd * p[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] = p[k] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}
