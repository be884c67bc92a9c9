use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::diffcore::{Gradients, ParamId, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Array> = params
            .iter()
            .map(|(_, p)| Array::zeros(p.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update. Parameters without a gradient are treated
/// as having a zero gradient; frozen parameters are left alone.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "state for {} parameters, got {}",
                state.m.len(),
                params.len()
            ),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let id = ParamId(i);
        let p = params.get_mut(id);
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        if m.shape() != p.value.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("moment shape mismatch for {}", p.name),
            ));
        }
        let g = grads.get(id);
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient shape mismatch for {}", p.name),
                ));
            }
        }
        let theta = p.value.data_mut();
        for (j, t) in theta.iter_mut().enumerate() {
            let gj = g.map_or(0.0, |g| g.data()[j]);
            let mj = cfg.beta1 * m.data()[j] + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v.data()[j] + (1.0 - cfg.beta2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            *t -= lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (ParamSet, ParamId) {
        let mut ps = ParamSet::new();
        let id = ps.push("w", Array::vector(vec![v])).unwrap();
        (ps, id)
    }

    #[test]
    fn first_step_closed_form() {
        let (mut ps, id) = one(0.0);
        let mut st = AdamState::new(&ps);
        let mut g = Gradients::new(1);
        g.set(id, Array::vector(vec![1.0]));
        adam_step(&mut ps, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
        let expected = -0.01 * 1.0 / (1.0 + 1e-8);
        assert!((ps.get(id).value.data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_is_noop() {
        let (mut ps, id) = one(3.0);
        let mut st = AdamState::new(&ps);
        adam_step(
            &mut ps,
            &Gradients::new(1),
            &mut st,
            0.01,
            &AdamConfig::default(),
        )
        .unwrap();
        assert_eq!(ps.get(id).value.data()[0], 3.0);
    }

    #[test]
    fn first_step_opposes_gradient() {
        for g0 in [-5.0, -1e-6, 2e-3, 40.0] {
            let (mut ps, id) = one(1.0);
            let mut st = AdamState::new(&ps);
            let mut g = Gradients::new(1);
            g.set(id, Array::vector(vec![g0]));
            adam_step(&mut ps, &g, &mut st, 0.01, &AdamConfig::default()).unwrap();
            let d: f64 = ps.get(id).value.data()[0] - 1.0;
            assert_eq!(d.signum(), -g0.signum());
        }
    }
}
