//! Adam and the step-decay schedule.

use super::Parameters;
use crate::error::{Result, RetoError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments shaped like the parameters, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<P> {
    pub m: P,
    pub v: P,
    pub t: u64,
}

impl<P: Parameters> OptimizerState<P> {
    pub fn new(params: &P) -> Self {
        Self {
            m: params.zeroed(),
            v: params.zeroed(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are untouched if any gradient is non-finite.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut OptimizerState<P>, lr: f64, cfg: &AdamConfig) -> Result<()> {
    let gs = grads.named_slices();
    for (name, g) in &gs {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(RetoError::NonFiniteGradient {
                name: name.clone(),
                index,
            });
        }
    }
    let ps = params.named_slices_mut();
    if ps.len() != gs.len() || ps.iter().zip(&gs).any(|(p, g)| p.1.len() != g.1.len()) {
        return Err(RetoError::Shape("gradient layout differs from parameters".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ms = state.m.named_slices_mut();
    let vs = state.v.named_slices_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for (((p, g), m), v) in p.1.iter_mut().zip(g.1).zip(m.1.iter_mut()).zip(v.1.iter_mut()) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// `initial_lr · factor^⌊epoch / step⌋`.
pub fn steplr(epoch: u64, initial_lr: f64, factor: f64, step: u64) -> f64 {
    initial_lr * factor.powi((epoch / step.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Dense;
    use ndarray::array;

    fn scalar(w: f64) -> Dense {
        Dense {
            weight: array![[w]],
            bias: array![0.0],
        }
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut p = scalar(1.0);
        let mut g = p.zeroed();
        g.weight[[0, 0]] = -3.7;
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
        assert!((p.weight[[0, 0]] - 1.01).abs() < 1e-9);
        assert_eq!(st.t, 1);
        assert_eq!(p.bias[0], 0.0);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar(0.3);
        let before = p.clone();
        let g = p.zeroed();
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn two_constant_steps_follow_the_recursion() {
        // g = 1: m1 = 0.1, v1 = 0.001, m2 = 0.19, v2 = 0.001999
        // both bias-corrected ratios are 1, so each step is lr / (1 + eps)
        let mut p = scalar(0.0);
        let mut g = p.zeroed();
        g.weight[[0, 0]] = 1.0;
        let mut st = OptimizerState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        adam_step(&mut p, &g, &mut st, 0.1, &cfg).unwrap();
        assert!((st.m.weight[[0, 0]] - 0.19).abs() < 1e-15);
        assert!((st.v.weight[[0, 0]] - 0.001999).abs() < 1e-15);
        let step2 = 0.1 * (0.19 / 0.19) / ((0.001999f64 / 0.001999).sqrt() + 1e-8);
        let step1 = 0.1 / (1.0 + 1e-8);
        assert!((p.weight[[0, 0]] + step1 + step2).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_is_named() {
        let mut p = scalar(1.0);
        let mut g = p.zeroed();
        g.bias[0] = f64::NAN;
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &g, &mut st, 0.1, &AdamConfig::default());
        assert!(matches!(err, Err(RetoError::NonFiniteGradient { ref name, index: 0 }) if name == "bias"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn schedule() {
        assert_eq!(steplr(0, 1e-3, 0.5, 50), 1e-3);
        assert_eq!(steplr(49, 1e-3, 0.5, 50), 1e-3);
        assert_eq!(steplr(50, 1e-3, 0.5, 50), 5e-4);
        assert_eq!(steplr(150, 1e-3, 0.5, 50), 1.25e-4);
        let mut last = f64::INFINITY;
        for e in 0..400 {
            let lr = steplr(e, 1e-3, 0.5, 50);
            assert!(lr <= last);
            last = lr;
        }
    }
}
