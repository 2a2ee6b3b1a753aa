//! Plain gradient descent and Adam over [`ParamVector`]s.

use serde::{Deserialize, Serialize};

use crate::params::{ParamVars, ParamVector};
use crate::AutodiffError;

/// `params - lr * grad`
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector, AutodiffError> {
    params.zip_map(grad, |p, g| p - lr * g)
}

/// Traced gradient step: the result stays a differentiable function of
/// whatever `grad` depends on.
pub fn sgd_step_traced<'t>(params: &ParamVars<'t>, grad: &ParamVars<'t>, lr: f64) -> ParamVars<'t> {
    assert_eq!(params.len(), grad.len(), "sgd_step_traced: structure mismatch");
    ParamVars::from_vars(
        params
            .iter()
            .zip(grad.iter())
            .map(|((name, p), (_, g))| (name.to_string(), p - g.scale(lr))),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper {
            lr,
            ..Default::default()
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: ParamVector,
    pub v: ParamVector,
    pub step: u64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }
}

pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grad: &ParamVector,
    hyper: &AdamHyper,
) -> Result<(ParamVector, AdamState), AutodiffError> {
    params.check_structure(grad)?;
    params.check_structure(&state.m)?;
    let step = state.step + 1;
    let m = state
        .m
        .zip_map(grad, |m, g| hyper.beta1 * m + (1.0 - hyper.beta1) * g)?;
    let v = state
        .v
        .zip_map(grad, |v, g| hyper.beta2 * v + (1.0 - hyper.beta2) * g * g)?;
    let bc1 = 1.0 - hyper.beta1.powi(step as i32);
    let bc2 = 1.0 - hyper.beta2.powi(step as i32);
    let flat_m = m.flatten();
    let flat_v = v.flatten();
    let updated: Vec<f64> = params
        .flatten()
        .iter()
        .zip(flat_m.iter().zip(&flat_v))
        .map(|(p, (m, v))| {
            let mhat = m / bc1;
            let vhat = v / bc2;
            p - hyper.lr * mhat / (vhat.sqrt() + hyper.eps)
        })
        .collect();
    Ok((params.unflatten(&updated)?, AdamState { m, v, step }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn pv(values: &[f64]) -> ParamVector {
        let mut p = ParamVector::new();
        p.insert("x", Tensor::row(values.to_vec())).unwrap();
        p
    }

    #[test]
    fn sgd_arithmetic() {
        let out = sgd_step(&pv(&[1.0]), &pv(&[2.0]), 0.5).unwrap();
        assert_eq!(out.flatten(), vec![0.0]);
    }

    #[test]
    fn sgd_zero_grad_is_identity() {
        let p = pv(&[1.0, -2.0]);
        assert_eq!(sgd_step(&p, &p.zeros_like(), 0.1).unwrap(), p);
    }

    #[test]
    fn adam_zero_grad_fresh_state_is_identity() {
        let p = pv(&[1.0, -2.0]);
        let (q, _) = adam_step(&AdamState::new(&p), &p, &p.zeros_like(), &AdamHyper::default()).unwrap();
        assert_eq!(q, p);
    }

    #[test]
    fn adam_is_deterministic() {
        let p = pv(&[1.0, -2.0]);
        let g = pv(&[0.3, -0.1]);
        let s = AdamState::new(&p);
        let a = adam_step(&s, &p, &g, &AdamHyper::default()).unwrap();
        let b = adam_step(&s, &p, &g, &AdamHyper::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adam_step_decreases_quadratic() {
        let p = pv(&[1.0, -2.0, 0.5]);
        let loss = |p: &ParamVector| 0.5 * p.norm_sq();
        let (q, _) = adam_step(&AdamState::new(&p), &p, &p, &AdamHyper::default()).unwrap();
        assert!(loss(&q) < loss(&p));
    }
}
