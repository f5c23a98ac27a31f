use crate::error::{Error, Result};
use crate::params::ParamTree;

/// Linearly decayed learning rate: `base · (1 − step/total)`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be at least 1"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} is past total_steps {total_steps}")));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First/second moment estimates for one parameter tree.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    pub step: u64,
}

impl<P: ParamTree + Clone> AdamState<P> {
    /// Zero moments congruent with `params`.
    pub fn new(params: &P) -> Self {
        let mut m = params.clone();
        m.fill_zero();
        AdamState { v: m.clone(), m, step: 0 }
    }
}

/// One bias-corrected Adam update of `params` in place.
///
/// Fails before touching anything if a gradient entry is non-finite or the
/// trees are not congruent.
pub fn adam_step<P: ParamTree>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {lr} must be finite and ≥ 0")));
    }
    let g = grads.tensors();
    if let Some(t) = g.iter().find(|t| t.data.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFinite(format!("gradient of `{}`", t.name)));
    }
    let p = params.tensors_mut();
    if p.len() != g.len() || p.iter().zip(&g).any(|(a, b)| a.len() != b.data.len()) {
        return Err(Error::Shape("gradient tree is not congruent with parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((w, gt), m), v) in p.into_iter().zip(&g).zip(state.m.tensors_mut()).zip(state.v.tensors_mut()) {
        for i in 0..w.len() {
            let gi = gt.data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.epsilon);
            w[i] -= lr * update;
        }
    }
    Ok(())
}
