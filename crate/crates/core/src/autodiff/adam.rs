use super::params::{Grads, ParamStore};
use super::tensor::Tensor;

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

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = params.zeros_like().tensors;
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamStore, grads: &Grads, state: &mut AdamState) {
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for id in 0..params.len() {
        let g = grads.get(id).data();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let theta = params.tensor_mut(id).data_mut();
        for k in 0..theta.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            theta[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn scalar_store(v: f64) -> ParamStore {
        let mut map = BTreeMap::new();
        map.insert("theta".to_string(), Tensor::row_vector(vec![v]));
        ParamStore::from_map(map)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut ps = scalar_store(0.7);
        let mut st = AdamState::new(&ps, AdamConfig::default());
        let g = ps.zeros_like();
        adam_step(&mut ps, &g, &mut st);
        assert_eq!(ps.tensor(0).get(0, 0), 0.7);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = scalar_store(1.0);
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        let mut st = AdamState::new(&ps, cfg);
        let mut g = ps.zeros_like();
        g.tensors[0].set(0, 0, 1.0);
        adam_step(&mut ps, &g, &mut st);
        // m_hat = 1, v_hat = 1, update = 0.1 / (1 + 1e-8)
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((ps.tensor(0).get(0, 0) - expected).abs() < 1e-15);
        assert!((1.0 - ps.tensor(0).get(0, 0) - 0.1).abs() < 1e-8);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut ps = scalar_store(0.3);
            let mut st = AdamState::new(&ps, AdamConfig::default());
            let mut g = ps.zeros_like();
            g.tensors[0].set(0, 0, -0.42);
            adam_step(&mut ps, &g, &mut st);
            adam_step(&mut ps, &g, &mut st);
            (ps, st)
        };
        assert_eq!(run(), run());
    }
}
