//! Bias-corrected adaptive-moment optimizer with per-group learning rates
//! and the half-cycle cosine schedule.

use crate::tensor::{ParamGroup, ParamStore, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.95, eps: 1e-8 }
    }
}

/// First/second moment arrays in parameter-store order plus the step count.
#[derive(Clone, Debug)]
pub struct OptimizerState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> OptimizerState<T> {
        OptimizerState {
            m: store.entries.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            v: store.entries.iter().map(|p| vec![T::zero(); p.data.len()]).collect(),
            step: 0,
            hyper: AdamHyper::default(),
        }
    }
}

/// lr = 0.5 lr0 (1 + cos(pi step / total)).
pub fn lr_schedule(step: u64, total: u64, lr0: f64) -> f64 {
    assert!(step <= total, "schedule step {} past total {}", step, total);
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// One optimizer step. `grads` is in store order; non-trainable parameters
/// are left untouched (their moments too). Learning rates are per group.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut OptimizerState<T>,
    lr_encoder: f64,
    lr_decoder: f64,
) {
    assert_eq!(grads.len(), store.entries.len(), "gradient count mismatch");
    state.step += 1;
    let t = state.step as f64;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powf(t);
    let bc2 = 1.0 - h.beta2.powf(t);
    for (i, p) in store.entries.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        assert_eq!(grads[i].len(), p.data.len(), "gradient shape mismatch for {}", p.name);
        let lr = match p.group {
            ParamGroup::Encoder => lr_encoder,
            ParamGroup::DecoderRenderer => lr_decoder,
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.data.len() {
            let g = grads[i][j].to_f64();
            let mj = h.beta1 * m[j].to_f64() + (1.0 - h.beta1) * g;
            let vj = h.beta2 * v[j].to_f64() + (1.0 - h.beta2) * g * g;
            m[j] = T::from_f64(mj);
            v[j] = T::from_f64(vj);
            let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + h.eps);
            p.data[j] = T::from_f64(p.data[j].to_f64() - update);
        }
    }
}
