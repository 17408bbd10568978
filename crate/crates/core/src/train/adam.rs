use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};
use indexmap::IndexMap;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update of every trainable parameter. Increments
    /// `store.step` first, so the first call runs with `t = 1`.
    pub fn step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        grads: &IndexMap<String, Tensor<T>>,
    ) -> Result<()> {
        if let Some((name, _)) = store
            .iter()
            .find(|(name, e)| e.trainable && !grads.contains_key(name.as_str()))
        {
            return Err(Error::State(format!(
                "no gradient for trainable parameter {name}"
            )));
        }
        for (name, g) in grads {
            let entry = store
                .get(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
            if entry.value.dims() != g.dims() {
                return Err(Error::shape(format!(
                    "{name}: gradient {} does not match parameter {}",
                    g.dims(),
                    entry.value.dims()
                )));
            }
        }
        store.step += 1;
        let t = store.step as i32;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::one() - T::of(self.beta1.powi(t));
        let c2 = T::one() - T::of(self.beta2.powi(t));
        let (lr, eps) = (T::of(self.lr), T::of(self.eps));
        for (name, entry) in store.iter_mut().filter(|(_, e)| e.trainable) {
            let g = &grads[name.as_str()];
            let (m, v) = entry
                .moments
                .get_or_insert_with(|| (Tensor::zeros(g.dims()), Tensor::zeros(g.dims())));
            let params = entry.value.data_mut();
            for (((p, m), v), &g) in params
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", vec![], Tensor::scalar(0.5), true).unwrap();
        s.insert("buf", vec![], Tensor::scalar(3.0), false).unwrap();
        s
    }

    fn grads(g: f64) -> IndexMap<String, Tensor<f64>> {
        IndexMap::from([("w".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        Adam::new(1e-4).step(&mut s, &grads(0.0)).unwrap();
        assert_eq!(s.value("w").unwrap().item(), 0.5);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        Adam::new(1e-4).step(&mut s, &grads(1.0)).unwrap();
        let moved = 0.5 - s.value("w").unwrap().item();
        // m̂ / (√v̂ + eps) = 1 / (1 + 1e-8)
        assert!((moved - 1e-4).abs() < 1e-11, "{moved}");
        assert_eq!(s.value("buf").unwrap().item(), 3.0);
    }

    #[test]
    fn hand_evaluated_second_step() {
        let mut s = store();
        let adam = Adam::new(0.1);
        adam.step(&mut s, &grads(1.0)).unwrap();
        adam.step(&mut s, &grads(-2.0)).unwrap();
        let m: f64 = 0.9 * 0.1 + 0.1 * -2.0;
        let v: f64 = 0.999 * 0.001 + 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected = 0.5 - 0.1 / (1.0 + 1e-8) - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((s.value("w").unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = store();
        match Adam::new(1e-4).step(&mut s, &IndexMap::new()) {
            Err(Error::State(msg)) => assert!(msg.contains('w'), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut s = store();
            for g in [0.3, -1.0, 2.5] {
                Adam::new(1e-2).step(&mut s, &grads(g)).unwrap();
            }
            s
        };
        assert_eq!(run(), run());
    }
}
