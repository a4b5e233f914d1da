use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates, zero-initialized on first use.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "{} grads for {} params",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::Dimension {
                op: "adamw_step",
                lhs: p.shape().to_vec(),
                rhs: vec![g.len()],
            });
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
        return Err(Error::InvalidArgument("optimizer state does not match params".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= decay;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamState::default();
        adamw_step(&mut p, &[vec![0.0; 3]], &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn pure_decay() {
        let mut p = vec![Tensor::new(vec![2], vec![2.0, -4.0]).unwrap()];
        let cfg = AdamWConfig {
            lr: 1.0,
            weight_decay: 0.1,
            ..Default::default()
        };
        adamw_step(&mut p, &[vec![0.0; 2]], &mut AdamState::default(), &cfg).unwrap();
        assert_eq!(p[0].data(), &[2.0 * 0.9, -4.0 * 0.9]);
    }

    #[test]
    fn hand_stepped_scalar() {
        // p=1, g=1 with defaults: m=0.1, v=0.001, both bias corrections give 1.
        let mut p = vec![Tensor::scalar(1.0)];
        adamw_step(&mut p, &[vec![1.0]], &mut AdamState::default(), &AdamWConfig::default()).unwrap();
        let expected = 1.0 * (1.0 - 1e-3 * 0.01) - 1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((p[0].item() - expected).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![Tensor::zeros(vec![2])];
        let err = adamw_step(
            &mut p,
            &[vec![0.0; 3]],
            &mut AdamState::default(),
            &AdamWConfig::default(),
        );
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }
}
