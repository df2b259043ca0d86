//! Adam and AdamW parameter updates.
//!
//! AdamW applies decoupled weight decay (`p -= lr * wd * p`) before the
//! bias-corrected Adam delta; `adam_step` is the same code path with the
//! decay term disabled.

use super::{Tensor, TensorError, TensorResult};
use ndarray::ArrayD;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f32) -> Self {
        AdamHyper {
            lr,
            ..Self::default()
        }
    }

    pub fn with_decay(lr: f32, weight_decay: f32) -> Self {
        AdamHyper {
            lr,
            weight_decay,
            ..Self::default()
        }
    }
}

/// First/second moment accumulators, one pair per parameter, plus the step
/// counter. The accumulator order is the parameter order given at build time.
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub t: u64,
    m: Vec<ArrayD<f32>>,
    v: Vec<ArrayD<f32>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper, params: &[Tensor]) -> Self {
        OptimizerState {
            hyper,
            t: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.value().raw_dim())).collect(),
        }
    }

    fn check(&self, params: &[Tensor]) -> TensorResult<()> {
        if params.len() != self.m.len() {
            return Err(TensorError::Invalid(format!(
                "optimizer state holds {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter().zip(&self.m) {
            if p.value().shape() != m.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    left: p.value().shape().to_vec(),
                    right: m.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn step(params: &[Tensor], state: &mut OptimizerState, decoupled_decay: bool) -> TensorResult<()> {
    state.check(params)?;
    state.t += 1;
    let h = state.hyper;
    let t = state.t as i32;
    let bias1 = 1.0 - h.beta1.powi(t);
    let bias2 = 1.0 - h.beta2.powi(t);
    for (i, p) in params.iter().enumerate() {
        let grad = p
            .grad()
            .unwrap_or_else(|| ArrayD::zeros(p.value().raw_dim()));
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        ndarray::Zip::from(&mut *m).and(&grad).for_each(|m, &g| {
            *m = h.beta1 * *m + (1.0 - h.beta1) * g;
        });
        ndarray::Zip::from(&mut *v).and(&grad).for_each(|v, &g| {
            *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
        });
        let mut value = p.value().clone();
        ndarray::Zip::from(&mut value)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| {
                if decoupled_decay {
                    *p -= h.lr * h.weight_decay * *p;
                }
                let m_hat = m / bias1;
                let v_hat = v / bias2;
                *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
            });
        p.set_value(value);
    }
    Ok(())
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adamw_step(params: &[Tensor], state: &mut OptimizerState) -> TensorResult<()> {
    step(params, state, true)
}

/// Plain bias-corrected Adam: no decay term regardless of `weight_decay`.
pub fn adam_step(params: &[Tensor], state: &mut OptimizerState) -> TensorResult<()> {
    step(params, state, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{backward, mul, sum_all};
    use ndarray::arr1;

    fn param(vals: &[f32]) -> Tensor {
        Tensor::param(arr1(vals).into_dyn())
    }

    #[test]
    fn first_step_moves_by_lr() {
        // grad = 1, param = 0: m_hat = 1, v_hat = 1, delta = lr/(1+eps)
        let p = param(&[0.0]);
        p.accumulate_test_grad(&[1.0]);
        let mut state = OptimizerState::new(AdamHyper::with_lr(0.1), std::slice::from_ref(&p));
        adamw_step(std::slice::from_ref(&p), &mut state).unwrap();
        assert!((p.to_vec()[0] + 0.1).abs() < 1e-6, "got {}", p.to_vec()[0]);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn zero_decay_adamw_equals_adam_bitwise() {
        let a = param(&[0.7, -0.3]);
        let b = param(&[0.7, -0.3]);
        a.accumulate_test_grad(&[0.25, -1.5]);
        b.accumulate_test_grad(&[0.25, -1.5]);
        let mut sa = OptimizerState::new(AdamHyper::with_decay(0.05, 0.0), std::slice::from_ref(&a));
        let mut sb = OptimizerState::new(AdamHyper::with_decay(0.05, 0.0), std::slice::from_ref(&b));
        adamw_step(std::slice::from_ref(&a), &mut sa).unwrap();
        adam_step(std::slice::from_ref(&b), &mut sb).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn zero_grad_decay_only_shrinks_param() {
        let p = param(&[2.0]);
        // no gradient at all: decay path only
        let mut state =
            OptimizerState::new(AdamHyper::with_decay(0.1, 0.01), std::slice::from_ref(&p));
        adamw_step(std::slice::from_ref(&p), &mut state).unwrap();
        assert_eq!(p.to_vec()[0], 2.0 * (1.0 - 0.001));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = param(&[1.0]);
        let q = param(&[1.0, 2.0]);
        let mut state = OptimizerState::new(AdamHyper::default(), std::slice::from_ref(&p));
        assert!(adamw_step(std::slice::from_ref(&q), &mut state).is_err());
    }

    #[test]
    fn descends_a_quadratic() {
        let p = param(&[3.0]);
        let mut state = OptimizerState::new(AdamHyper::with_lr(0.1), std::slice::from_ref(&p));
        for _ in 0..200 {
            p.zero_grad();
            let loss = sum_all(&mul(&p, &p).unwrap());
            backward(&loss).unwrap();
            adamw_step(std::slice::from_ref(&p), &mut state).unwrap();
        }
        assert!(p.to_vec()[0].abs() < 0.05);
    }

    impl Tensor {
        fn accumulate_test_grad(&self, g: &[f32]) {
            let arr = arr1(g).into_dyn();
            self.accumulate_grad(&arr);
        }
    }
}
