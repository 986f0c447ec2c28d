//! Named parameter storage and Xavier initialisation.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Convolution / deconvolution kernel. Participates in L2 decay.
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running statistics: checkpointed but never trained.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    pub fn decayed(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T: Scalar> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> ParamEntry<T> {
    pub fn decayed(&self) -> bool {
        self.kind.decayed()
    }
}

/// Parameters keyed by unique name, iterated in name order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar> {
    entries: BTreeMap<String, ParamEntry<T>>,
}

/// Tape handles for the trainable entries of a [`ParamStore`].
pub struct Binding<'a, T: Scalar> {
    vars: HashMap<String, Var>,
    store: &'a ParamStore<T>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn from_vars(store: &'a ParamStore<T>, vars: HashMap<String, Var>) -> Self {
        Binding { vars, store }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter `{name}` is not bound")))
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        kind: ParamKind,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, ParamEntry { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.tensor)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Records every trainable tensor on the tape as a named parameter.
    pub fn bind<'a>(&'a self, tape: &mut Tape<T>) -> Binding<'a, T> {
        let vars = self
            .entries
            .iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(k, e)| (k.clone(), tape.param(k.clone(), e.tensor.clone())))
            .collect();
        Binding { vars, store: self }
    }

    /// Writes gradients into the grad slot of every trainable tensor
    /// (zeros for those the loss did not reach).
    pub fn apply_gradients(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (name, entry) in self.entries.iter_mut() {
            if !entry.kind.trainable() {
                continue;
            }
            let g = grads
                .param(name)
                .unwrap_or_else(|| Tensor::zeros(entry.tensor.shape()));
            entry.tensor.set_grad(g.into_data())?;
        }
        Ok(())
    }

    pub fn scalar_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Uniform samples on `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_init<T: Scalar, R: Rng + ?Sized>(
    shape: Shape,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::invalid(format!(
            "xavier fans must be positive, got fan_in={fan_in} fan_out={fan_out}"
        )));
    }
    let bound = xavier_bound(fan_in, fan_out);
    let data = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.gen_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Independent generator for one named parameter, so a layer's initial
/// weights do not depend on which other layers exist.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_for_equal_fans_of_three_is_one() {
        assert!((xavier_bound(3, 3) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn samples_stay_in_support_and_match_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t: Tensor<f64> = xavier_init(Shape::new(100_000, 1, 1, 1), 3, 3, &mut rng).unwrap();
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        let mean = t.sum() / t.numel() as f64;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (t.numel() - 1) as f64;
        let want = 1.0 / 3.0;
        assert!((var - want).abs() / want < 0.05, "variance {var}");
    }

    #[test]
    fn same_seed_same_tensor() {
        let a: Tensor<f32> =
            xavier_init(Shape::new(4, 3, 3, 3), 27, 36, &mut param_rng(5, "w")).unwrap();
        let b: Tensor<f32> =
            xavier_init(Shape::new(4, 3, 3, 3), 27, 36, &mut param_rng(5, "w")).unwrap();
        let c: Tensor<f32> =
            xavier_init(Shape::new(4, 3, 3, 3), 27, 36, &mut param_rng(5, "v")).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_fan_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(xavier_init::<f32, _>(Shape::new(1, 1, 1, 1), 0, 1, &mut rng).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::scalar(1.0), ParamKind::Bias).unwrap();
        assert!(s.insert("a", Tensor::scalar(1.0), ParamKind::Bias).is_err());
    }

    #[test]
    fn gradients_populate_slots_with_zero_for_unreached() {
        let mut store = ParamStore::<f64>::new();
        store
            .insert("a", Tensor::vector(vec![1.0, 2.0]), ParamKind::Weight)
            .unwrap();
        store
            .insert("b", Tensor::vector(vec![1.0]), ParamKind::Bias)
            .unwrap();
        store
            .insert("m", Tensor::vector(vec![0.0]), ParamKind::RunningMean)
            .unwrap();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let a = bind.var("a").unwrap();
        assert!(bind.var("m").is_err());
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s).unwrap();
        store.apply_gradients(&g).unwrap();
        assert_eq!(store.tensor("a").unwrap().grad().unwrap(), &[1.0, 1.0]);
        assert_eq!(store.tensor("b").unwrap().grad().unwrap(), &[0.0]);
        assert!(store.tensor("m").unwrap().grad().is_none());
    }
}
