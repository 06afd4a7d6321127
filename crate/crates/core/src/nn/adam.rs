use ndarray::Zip;

use super::params::{Gradients, ParamStore};
use super::tape::Matrix;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(store: &ParamStore, learning_rate: f64) -> Self {
        let zeros: Vec<Matrix> = store
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.raw_dim()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for id in store.ids() {
            if let Some(g) = grads.get(id) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(store.name(id).to_string()));
                }
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);

        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            match grads.get(super::params::ParamId(i)) {
                Some(g) => {
                    Zip::from(&mut entry.value)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        });
                }
                None => {
                    Zip::from(&mut entry.value)
                        .and(m)
                        .and(v)
                        .for_each(|p, m, v| {
                            *m *= b1;
                            *v *= b2;
                            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamId;
    use ndarray::array;

    fn single(w: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::default();
        let id = store.add("w", array![[w]]);
        (store, id)
    }

    fn grads_of(id: ParamId, g: f64) -> Gradients {
        let mut grads = Gradients::default();
        grads.accumulate(id, array![[g]]);
        grads
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut store, id) = single(0.7);
        let mut adam = AdamState::new(&store, 3e-4);
        adam.step(&mut store, &grads_of(id, 1.0)).unwrap();
        let after_one = store.value(id)[[0, 0]];
        let m_before = adam.first_moment[0][[0, 0]];
        for _ in 0..5 {
            adam.step(&mut store, &grads_of(id, 0.0)).unwrap();
        }
        // the decaying first moment still moves the parameter, but with a fresh
        // state a zero gradient changes nothing
        assert!(adam.first_moment[0][[0, 0]].abs() < m_before.abs());
        assert!(after_one < 0.7);

        let (mut fresh, id2) = single(0.7);
        let mut adam2 = AdamState::new(&fresh, 3e-4);
        for _ in 0..10 {
            adam2.step(&mut fresh, &grads_of(id2, 0.0)).unwrap();
        }
        assert_eq!(fresh.value(id2)[[0, 0]], 0.7);
        assert_eq!(adam2.step_count, 10);
    }

    #[test]
    fn constant_gradient_steps_approach_learning_rate() {
        let (mut store, id) = single(0.0);
        let lr = 3e-4;
        let mut adam = AdamState::new(&store, lr);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..2000 {
            adam.step(&mut store, &grads_of(id, 0.37)).unwrap();
            let w = store.value(id)[[0, 0]];
            last_step = prev - w;
            prev = w;
        }
        assert!((last_step - lr).abs() / lr < 1e-6, "{last_step}");
    }

    #[test]
    fn step_size_is_gradient_scale_invariant() {
        let run = |g: f64| {
            let (mut store, id) = single(0.0);
            let mut adam = AdamState::new(&store, 3e-4);
            let mut prev = 0.0;
            let mut step = 0.0;
            for _ in 0..500 {
                adam.step(&mut store, &grads_of(id, g)).unwrap();
                let w = store.value(id)[[0, 0]];
                step = prev - w;
                prev = w;
            }
            step
        };
        let (a, b) = (run(1.0), run(10.0));
        assert!((a - b).abs() / a < 1e-6, "{a} vs {b}");
    }

    #[test]
    fn minimizes_quadratic_bowl() {
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, 3e-4);
        for _ in 0..10_000 {
            let w = store.value(id)[[0, 0]];
            adam.step(&mut store, &grads_of(id, 2.0 * w)).unwrap();
        }
        assert!(store.value(id)[[0, 0]].abs() < 1e-3, "{}", store.value(id)[[0, 0]]);
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let (mut store, id) = single(1.0);
        let mut adam = AdamState::new(&store, 3e-4);
        assert!(matches!(
            adam.step(&mut store, &grads_of(id, f64::NAN)),
            Err(Error::NonFiniteGradient(_))
        ));
        assert_eq!(adam.step_count, 0);
    }
}
