//! AdamW with AMSGrad and per-tensor update-RMS clipping.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Upper bound on each tensor's update RMS before the learning rate is applied.
    pub clip_rms: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_rms: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: ParamSet<T>,
    pub v: ParamSet<T>,
    pub v_max: ParamSet<T>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            v_max: params.zeros_like(),
        }
    }
}

/// One update of every tensor in `params` that has a gradient.
pub fn optimizer_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            state.step + 1
        )));
    }
    for (name, g) in grads.iter() {
        let w = params.get(name)?;
        if w.shape() != g.shape() {
            return Err(Error::Config(format!(
                "gradient `{name}` has shape {:?}, weight {:?}",
                g.shape(),
                w.shape()
            )));
        }
    }
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
    for (name, g) in grads.iter() {
        let m = state.m.get_mut(name)?;
        Zip::from(&mut *m)
            .and(g)
            .for_each(|m, &g| *m = b1 * *m + (T::one() - b1) * g);
        let v = state.v.get_mut(name)?;
        Zip::from(&mut *v)
            .and(g)
            .for_each(|v, &g| *v = b2 * *v + (T::one() - b2) * g * g);
        let v = state.v.get(name)?.clone();
        let vmax = state.v_max.get_mut(name)?;
        Zip::from(&mut *vmax).and(&v).for_each(|a, &b| *a = a.max(b));

        let m = state.m.get(name)?;
        let vmax = state.v_max.get(name)?;
        let mut update = m.clone();
        Zip::from(&mut update).and(vmax).for_each(|u, &vm| {
            let mh = u.to_f64().unwrap() / bc1;
            let vh = vm.to_f64().unwrap() / bc2;
            *u = T::lit(mh / (vh.sqrt() + c.eps));
        });
        let n = update.len().max(1) as f64;
        let rms = (update.iter().map(|u| u.to_f64().unwrap().powi(2)).sum::<f64>() / n).sqrt();
        let scale = if rms > c.clip_rms { c.clip_rms / rms } else { 1.0 };

        let w = params.get_mut(name)?;
        let (lr, decay) = (c.lr, c.lr * c.weight_decay);
        Zip::from(w).and(&update).for_each(|w, &u| {
            let wf = w.to_f64().unwrap();
            *w = T::lit(wf - decay * wf - lr * scale * u.to_f64().unwrap());
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn single(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", ArrayD::from_elem(IxDyn(&[3]), v));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut p = single(0.7);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&p, cfg);
        optimizer_step(&mut st, &mut p, &single(0.0)).unwrap();
        assert!(p.get("w").unwrap().iter().all(|&x| x == 0.7));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = single(0.0);
        let mut st = OptimizerState::new(&p, OptimizerConfig::default());
        let err = optimizer_step(&mut st, &mut p, &single(f64::NAN)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(st.step, 0);
    }
}
