//! Adam with a fixed learning rate.

use crate::autograd::Grads;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn zeros(store: &ParamStore<f32>) -> Self {
        let m: Vec<_> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        AdamState { step: 0, v: m.clone(), m }
    }

    pub fn check_matches(&self, store: &ParamStore<f32>) -> Result<()> {
        if self.m.len() != store.len() || self.v.len() != store.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameter count".into()));
        }
        for ((_, name, p), (m, v)) in store.iter().zip(self.m.iter().zip(&self.v)) {
            if m.shape() != p.shape() || v.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("optimizer state shape mismatch for {name}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, learning_rate: f64) -> Self {
        Adam { learning_rate, state: AdamState::zeros(store) }
    }

    pub fn with_state(store: &ParamStore<f32>, learning_rate: f64, state: AdamState) -> Result<Self> {
        state.check_matches(store)?;
        Ok(Adam { learning_rate, state })
    }

    /// One update. Parameters without a gradient (absent from the graph)
    /// are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let lr = self.learning_rate;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let m = self.state.m[i].data_mut();
            let v = self.state.v[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g as f64;
                let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
                let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / bc1) / ((vn / bc2).sqrt() + EPSILON);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr * g / (|g| + eps)
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]));
        let mut adam = Adam::new(&store, 0.1);
        let grads = {
            let tape = Tape::new(&store);
            let w = tape.param(id);
            let loss = tape.sum_all(tape.scale(w, 3.0));
            tape.backward(loss)
        };
        adam.step(&mut store, &grads);
        let d = store.get(id).data();
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.1).abs() < 1e-6);
        assert_eq!(adam.state.step, 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::from_vec([1, 1, 1, 3], vec![2.0, -3.0, 0.5]));
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let grads = {
                let tape = Tape::new(&store);
                let w = tape.param(id);
                let loss = tape.sum_all(tape.square(w));
                tape.backward(loss)
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.get(id).data().iter().all(|v| v.abs() < 0.05));
    }
}
