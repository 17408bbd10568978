//! Parameterized layers built on the autodiff tape.
//!
//! Layers are small structs that remember the *names* of their parameters;
//! the values live in a [`ParamStore`]. A forward pass goes through a
//! [`Ctx`], which lazily puts each parameter on the tape the first time a
//! layer asks for it.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Real, Tensor};

mod batchnorm;
mod conv;
mod convlstm;
mod pool;

pub use batchnorm::{batch_norm, BatchNorm, BN_EPS, BN_MOMENTUM};
pub use conv::{conv2d, Conv2d, ConvBnRelu};
pub use convlstm::{ConvLstmCell, ConvLstmState, Gate};
pub use pool::{maxpool2, upsample2_nearest};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Infer,
}

/// Maps a logical parameter shape onto the 4-D tensor layout.
pub fn dims_for_shape(shape: &[usize]) -> Result<Dims> {
    match *shape {
        [] => Ok(Dims::scalar()),
        [c] => Dims::new(1, c, 1, 1),
        [a, b, c, d] => Dims::new(a, b, c, d),
        _ => Err(Error::shape(format!(
            "unsupported parameter rank {}",
            shape.len()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    /// Logical shape as written to checkpoints, e.g. `[c]` for a bias.
    pub shape: Vec<usize>,
    pub value: Tensor<T>,
    /// `false` for buffers such as batch-norm running statistics.
    pub trainable: bool,
    /// Adam first and second moments.
    pub moments: Option<(Tensor<T>, Tensor<T>)>,
}

/// Named, ordered parameters plus optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, ParamEntry<T>>,
    /// Number of optimizer steps taken so far.
    pub step: u64,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
            step: 0,
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Tensor<T>,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if dims_for_shape(&shape)? != value.dims() {
            return Err(Error::shape(format!(
                "{name}: shape {shape:?} does not match tensor dims {}",
                value.dims()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::State(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                shape,
                value,
                trainable,
                moments: None,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))
    }

    /// Overwrites a parameter's value, keeping its dims.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let entry = self
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        if entry.value.dims() != value.dims() {
            return Err(Error::shape(format!(
                "{name}: expected {}, got {}",
                entry.value.dims(),
                value.dims()
            )));
        }
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: e.shape.clone(),
                            value: e.value.cast(),
                            trainable: e.trainable,
                            moments: e.moments.as_ref().map(|(m, v)| (m.cast(), v.cast())),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(String, Tensor<T>)>) -> Result<()> {
        for (name, value) in updates {
            self.set(&name, value)?;
        }
        Ok(())
    }
}

/// Seeded source of initial parameter values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-style normal weights with std `sqrt(2 / fan_in)`.
    pub fn he_normal<T: Real>(&mut self, dims: Dims, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..dims.numel())
            .map(|_| T::of(dist.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(dims, data).expect("sized to dims")
    }
}

/// Per-forward-pass view of a [`ParamStore`] on a tape.
pub struct Ctx<'t, 's, T> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    mode: Mode,
    bound: RefCell<HashMap<String, Var<'t, T>>>,
    buffer_updates: RefCell<Vec<(String, Tensor<T>)>>,
}

impl<'t, 's, T: Real> Ctx<'t, 's, T> {
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>, mode: Mode) -> Self {
        Ctx {
            tape,
            store,
            mode,
            bound: RefCell::new(HashMap::new()),
            buffer_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Uses `var` in place of the stored parameter `name`.
    pub fn bind(&self, name: &str, var: Var<'t, T>) -> Result<()> {
        let expected = self.store.value(name)?.dims();
        if var.dims() != expected {
            return Err(Error::shape(format!(
                "{name}: bound value has dims {}, expected {expected}",
                var.dims()
            )));
        }
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(())
    }

    /// The tape variable for a parameter; trainable entries become leaves.
    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let entry = self
            .store
            .get(name)
            .ok_or_else(|| Error::State(format!("unknown parameter {name}")))?;
        let var = if entry.trainable {
            self.tape.leaf(entry.value.clone())
        } else {
            self.tape.constant(entry.value.clone())
        };
        self.bound.borrow_mut().insert(name.to_string(), var);
        Ok(var)
    }

    pub(crate) fn push_buffer_update(&self, name: &str, value: Tensor<T>) {
        self.buffer_updates
            .borrow_mut()
            .push((name.to_string(), value));
    }

    pub fn take_buffer_updates(&self) -> Vec<(String, Tensor<T>)> {
        std::mem::take(&mut *self.buffer_updates.borrow_mut())
    }

    /// Gradients for every trainable parameter that was put on the tape.
    /// Parameters the loss does not depend on get zeros.
    pub fn param_grads(&self, grads: &Grads<T>) -> IndexMap<String, Tensor<T>> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .filter_map(|(name, e)| {
                let var = bound.get(name)?;
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(e.value.dims()));
                Some((name.clone(), g))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logical_shapes() {
        assert_eq!(dims_for_shape(&[]).unwrap(), Dims::scalar());
        assert_eq!(dims_for_shape(&[5]).unwrap(), Dims::from([1, 5, 1, 1]));
        assert!(dims_for_shape(&[2, 3]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", vec![], Tensor::scalar(0.0), true).unwrap();
        assert!(matches!(
            s.insert("a", vec![], Tensor::scalar(1.0), true),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn he_normal_std_matches_fan_in() {
        let mut init = Initializer::new(11);
        let w: Tensor<f64> = init.he_normal(Dims::from([70, 16, 3, 3]), 16 * 9);
        assert!(w.numel() >= 10_000);
        let n = w.numel() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let var = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = (2.0f64 / 144.0).sqrt();
        assert!((var.sqrt() - expected).abs() < 0.2 * expected);
    }

    #[test]
    fn same_seed_same_values() {
        let a: Tensor<f32> = Initializer::new(3).he_normal(Dims::from([4, 2, 3, 3]), 18);
        let b: Tensor<f32> = Initializer::new(3).he_normal(Dims::from([4, 2, 3, 3]), 18);
        assert_eq!(a, b);
    }

    #[test]
    fn unused_params_get_no_grad_entry() {
        let mut s = ParamStore::<f64>::new();
        s.insert("used", vec![], Tensor::scalar(2.0), true).unwrap();
        s.insert("unused", vec![], Tensor::scalar(2.0), true)
            .unwrap();
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &s, Mode::Train);
        let loss = ctx.param("used").unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        let g = ctx.param_grads(&grads);
        assert_eq!(g.len(), 1);
        assert_eq!(g["used"].item(), 1.0);
    }
}
