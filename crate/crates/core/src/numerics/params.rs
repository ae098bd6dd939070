use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use super::error::{NumericsError, Result};
use super::float::Float;
use super::tensor::Tensor;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

fn next_uid() -> u64 {
    NEXT_UID.fetch_add(1, Ordering::Relaxed)
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T: Float = f32> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
    requires_grad: bool,
    uid: u64,
}

impl<T: Float> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the value; copies only if a graph still holds it.
    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Gradients produced by one backward pass, keyed by parameter identity.
#[derive(Debug, Default, Clone)]
pub struct Gradients<T: Float = f32> {
    pub(crate) by_uid: BTreeMap<u64, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn is_empty(&self) -> bool {
        self.by_uid.is_empty()
    }

    /// Adds `other` into `self`, entry by entry.
    pub fn merge(&mut self, other: Gradients<T>) {
        for (uid, g) in other.by_uid {
            match self.by_uid.get_mut(&uid) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.by_uid.insert(uid, g);
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.by_uid.values_mut() {
            for x in g.data_mut() {
                *x *= factor;
            }
        }
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Float = f32> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateName(name));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape().to_vec());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
            requires_grad: true,
            uid: next_uid(),
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar values across all parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        for p in &mut self.params {
            p.requires_grad = requires_grad;
        }
    }

    pub fn set_requires_grad_for(&mut self, name: &str, requires_grad: bool) -> Result<()> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        p.requires_grad = requires_grad;
        Ok(())
    }

    /// Adds gradients from a backward pass into the matching parameters.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for p in &mut self.params {
            if !p.requires_grad {
                continue;
            }
            if let Some(g) = grads.by_uid.get(&p.uid) {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
    }

    /// Copy with a different element type; the copy's parameters get fresh identities.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let id = out
                .insert(p.name.clone(), p.value.cast())
                .expect("names already unique");
            out.params[id.0].requires_grad = p.requires_grad;
        }
        out
    }

    /// Replaces a value, keeping name and identity.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .by_name_mut(name)
            .ok_or_else(|| NumericsError::UnknownParam(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(super::error::shape_err(
                "set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }
}

/// Uniform initialization in `[-bound, bound]`.
pub fn uniform<T: Float>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Fan-in scaled uniform initialization for a `[fan_in, fan_out]` matrix.
pub fn fan_in_uniform<T: Float>(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor<T> {
    uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(
            s.insert("a", Tensor::zeros(vec![2])),
            Err(NumericsError::DuplicateName(_))
        ));
    }

    #[test]
    fn grad_shape_matches_value() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("w", Tensor::zeros(vec![3, 4])).unwrap();
        assert_eq!(s.get(id).grad().shape(), &[3, 4]);
    }
}
