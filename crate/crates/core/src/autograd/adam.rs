use super::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// Moments for one parameter tensor. `step` counts the updates this tensor
/// has received, so a tensor that starts training late gets a fresh bias
/// correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(len: usize) -> Self {
        AdamSlot {
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub slots: Vec<AdamSlot>,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        AdamState {
            config,
            slots: params.into_iter().map(|p| AdamSlot::zeros(p.len())).collect(),
        }
    }

    /// One bias-corrected Adam update of `param` in place.
    pub fn step(&mut self, index: usize, param: &mut [f64], grad: &[f64], precision: Precision) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let slot = self
            .slots
            .get_mut(index)
            .ok_or_else(|| Error::Contract(format!("no optimizer slot {index}")))?;
        if slot.m.len() != param.len() || grad.len() != param.len() {
            return Err(Error::dim("adam_step", &[param.len()], &[grad.len(), slot.m.len()]));
        }
        slot.step += 1;
        let t = slot.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
            let m_hat = slot.m[i] / c1;
            let v_hat = slot.v[i] / c2;
            param[i] = precision.round(param[i] - lr * m_hat / (v_hat.sqrt() + eps));
        }
        Ok(())
    }

    /// Updates every tensor that carries a gradient; others are untouched.
    pub fn step_all(&mut self, params: &mut [Tensor], precision: Precision) -> Result<()> {
        if params.len() != self.slots.len() {
            return Err(Error::dim("adam_step", &[params.len()], &[self.slots.len()]));
        }
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let Some(g) = p.grad.take() else { continue };
            self.step(i, p.data_mut(), &g, precision)?;
            p.grad = Some(g);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut state = AdamState {
            config: AdamConfig::default(),
            slots: vec![AdamSlot::zeros(2)],
        };
        let mut p = vec![0.3, -0.7];
        state.step(0, &mut p, &[0.0, 0.0], Precision::Wide).unwrap();
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let config = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut state = AdamState {
            config,
            slots: vec![AdamSlot::zeros(1)],
        };
        let mut p = vec![0.0];
        state.step(0, &mut p, &[1.0], Precision::Wide).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
        assert_eq!(state.slots[0].step, 1);
    }

    #[test]
    fn identical_inputs_identical_updates() {
        let mk = || AdamState {
            config: AdamConfig::default(),
            slots: vec![AdamSlot::zeros(3)],
        };
        let (mut s1, mut s2) = (mk(), mk());
        let (mut p1, mut p2) = (vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]);
        for g in [[0.1, -0.2, 0.3], [1.5, 0.0, -2.0]] {
            s1.step(0, &mut p1, &g, Precision::Wide).unwrap();
            s2.step(0, &mut p2, &g, Precision::Wide).unwrap();
        }
        assert_eq!(p1, p2);
        assert_eq!(s1, s2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState {
            config: AdamConfig::default(),
            slots: vec![AdamSlot::zeros(2)],
        };
        let mut p = vec![0.0; 2];
        assert!(matches!(
            state.step(0, &mut p, &[1.0], Precision::Wide),
            Err(Error::Dimension { .. })
        ));
    }
}
