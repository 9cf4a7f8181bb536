//! Parameter update rules.

use crate::error::{Error, Result};
use crate::tensor::Params;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// `theta <- theta - lr * grads`
pub fn sgd_step(params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
    params.axpy(-lr, grads)
}

/// Bias-corrected Adam moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Params,
    v: Params,
    t: i32,
}

impl AdamState {
    pub fn new(like: &Params) -> Self {
        Self { m: like.zeros_like(), v: like.zeros_like(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }
}

pub fn adam_step(state: &mut AdamState, params: &mut Params, grads: &Params, lr: f64) -> Result<()> {
    params.check_congruent(grads, "adam")?;
    params.check_congruent(&state.m, "adam")?;
    state.t = state.t.checked_add(1).ok_or_else(|| Error::invalid("adam step counter overflow"))?;
    let c1 = 1.0 - BETA1.powi(state.t);
    let c2 = 1.0 - BETA2.powi(state.t);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(name: &str, v: &[f64]) -> Params {
        let mut p = Params::new();
        p.insert(name, Tensor::new(vec![v.len()], v.to_vec()).unwrap());
        p
    }

    #[test]
    fn sgd_examples() {
        let mut p = one("w", &[1.0]);
        let g = p.clone();
        sgd_step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p.flatten(), [1.0]);
        sgd_step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.flatten(), [0.9]);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = one("w", &[1.0, -2.0, 0.5]);
        let g = one("w", &[3.0, -0.01, 1e-3]);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &g, 0.01).unwrap();
        let want = [0.99, -1.99, 0.49];
        for (a, b) in p.flatten().iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut p = one("w", &[1.0, 2.0]);
        let g = one("w", &[1.0, 1.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut s, &mut p, &g, 0.0).unwrap();
        assert_eq!(p.flatten(), [1.0, 2.0]);
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let mut p = one("w", &[1.0]);
        let g = one("w", &[1.0, 2.0]);
        assert!(sgd_step(&mut p, &g, 0.1).is_err());
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut s, &mut p, &g, 0.1).is_err());
    }
}
