//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }
}

/// One Adam update in place. A non-finite gradient aborts before any
/// parameter is touched.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params[i].shape() {
            return Err(Error::dim(format!("adam: grad {i} shape {:?} vs param {:?}", g.shape(), params[i].shape())));
        }
        if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter {i} at element {pos} (value {})",
                g.data()[pos]
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_is_a_fixed_point() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let mut s = AdamState::new(&p);
        let before = p.clone();
        for _ in 0..3 {
            adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p, before);
        assert!(s.first_moments()[0].data().iter().all(|&x| x == 0.0));
        assert!(s.second_moments()[0].data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &[Tensor::scalar(1.0)], &mut s, &cfg).unwrap();
        let expect = -0.001 / (1.0 + 1e-8);
        assert!((p[0].item() - expect).abs() < 1e-15, "{}", p[0].item());
    }

    #[test]
    fn rejects_non_finite() {
        let mut p = vec![Tensor::scalar(0.0)];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut s, &AdamConfig::default());
        assert!(matches!(err, Err(Error::Numeric(_))));
        assert_eq!(p[0].item(), 0.0);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Tensor::from_vec(vec![0.3, -0.7, 1.1])];
            let mut s = AdamState::new(&p);
            for k in 0..50 {
                let g = p[0].map(|x| 2.0 * x + (k as f64).sin());
                adam_step(&mut p, &[g], &mut s, &AdamConfig::default()).unwrap();
            }
            p[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
