//! Named parameter registry.

use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Set once a backward pass has deposited a gradient since the last update.
    pub grad_ready: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("initial value of `{name}`")));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad,
            grad_ready: false,
            trainable: true,
        });
        Ok(ParamId(id))
    }

    /// Xavier-uniform weight matrix of shape `fan_in × fan_out`.
    pub fn add_xavier<R: Rng>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::matrix(fan_in, fan_out, data)?)
    }

    pub fn add_constant(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> Result<ParamId> {
        self.add(name, Tensor::matrix(rows, cols, vec![value; rows * cols])?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Adds `scale · grads` into the stored gradients and marks every covered
    /// parameter as ready.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (param, grad) in self.params.iter_mut().zip(&grads.per_param) {
            if let Some(g) = grad {
                param.grad.add_scaled(g, scale);
            }
            param.grad_ready = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.grad_ready = false;
        }
    }

    /// Copies every value from `other`, which must have the same names and
    /// shapes. Offending names are reported together.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        let mut bad = Vec::new();
        for p in &self.params {
            match other.index.get(&p.name) {
                None => bad.push(format!("{} (missing)", p.name)),
                Some(&j) if other.params[j].value.shape() != p.value.shape() => bad.push(format!(
                    "{} ({:?} vs {:?})",
                    p.name,
                    p.value.shape(),
                    other.params[j].value.shape()
                )),
                Some(_) => {}
            }
        }
        for name in other.names() {
            if !self.index.contains_key(name) {
                bad.push(format!("{name} (unexpected)"));
            }
        }
        if !bad.is_empty() {
            return Err(Error::WarmStartMismatch(bad));
        }
        for p in &mut self.params {
            p.value = other.params[other.index[&p.name]].value.clone();
        }
        Ok(())
    }
}

/// Gradients of a scalar with respect to every parameter of a store, as
/// produced by one backward pass. `None` means the parameter did not take
/// part in the computation (its gradient is zero).
#[derive(Clone, Debug)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros(num_params: usize) -> Self {
        Self {
            per_param: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.per_param.get(id.0).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.per_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_param.is_empty()
    }

    /// Value of one gradient coordinate, zero when the parameter is untouched.
    pub fn coordinate(&self, id: ParamId, index: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g.data()[index])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            store.add("w", Tensor::scalar(2.0)),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let id = store.add_xavier("w", 10, 20, &mut rng).unwrap();
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(store.value(id).data().iter().all(|v| v.abs() <= bound));
        assert_eq!(store.get(id).grad.shape(), &[10, 20]);
    }

    #[test]
    fn load_values_lists_every_mismatch() {
        let mut a = ParamStore::new();
        a.add_constant("x", 2, 2, 0.0).unwrap();
        a.add_constant("y", 1, 3, 0.0).unwrap();
        let mut b = ParamStore::new();
        b.add_constant("x", 2, 3, 1.0).unwrap();
        b.add_constant("z", 1, 3, 1.0).unwrap();
        match a.load_values(&b) {
            Err(Error::WarmStartMismatch(bad)) => assert_eq!(bad.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
