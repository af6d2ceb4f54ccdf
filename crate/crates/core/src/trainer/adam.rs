use crate::numerics::{ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            first: zeros.clone(),
            second: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step using the gradients held in `store`,
/// with decoupled weight decay `w ← w − lr·(m̂/(√v̂ + ε) + wd·w)`.
/// Gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64, weight_decay: f64) {
    assert_eq!(state.first.len(), store.len(), "optimizer state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.first).zip(&mut state.second) {
        let w = p.value.data_mut();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, g) in p.grad.data().iter().enumerate() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g;
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g * g;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
            w[i] -= lr * (update + weight_decay * w[i]);
        }
        p.grad.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(w));
        s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
        s
    }

    fn value(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.value.item()
    }

    #[test]
    fn zero_gradient_no_decay_is_a_no_op() {
        let mut s = store(0.7, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, 0.0);
        assert_eq!(value(&s), 0.7);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store(0.0, 1.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, 0.0);
        // m̂ = 1, v̂ = 1 → Δ = −lr/(1 + ε)
        assert!((value(&s) + 1e-3 / (1.0 + EPSILON)).abs() < 1e-18);
        assert_eq!(s.iter().next().unwrap().1.grad.item(), 0.0);
    }

    #[test]
    fn decay_alone_shrinks_multiplicatively() {
        let mut s = store(2.0, 0.0);
        let mut st = AdamState::new(&s);
        adam_step(&mut s, &mut st, 1e-3, 1e-2);
        assert_eq!(value(&s), 2.0 - 1e-3 * 1e-2 * 2.0);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let mut s = store(0.3, 0.0);
        let mut st = AdamState::new(&s);
        for k in 0..50 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar((k as f64).sin());
            adam_step(&mut s, &mut st, 0.0, 1e-3);
        }
        assert_eq!(value(&s), 0.3);
        assert_eq!(st.step, 50);
    }
}
