use std::sync::atomic::{AtomicU64, Ordering};

use super::{mismatch, Real, Tensor, TensorError};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Handle to a parameter inside a specific [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId {
    pub(crate) store: u64,
    pub(crate) index: usize,
}

impl ParamId {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    /// Split borrow used by optimizers.
    pub fn value_and_grad_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.value, &mut self.grad)
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }

    pub fn set_value(&mut self, value: Tensor<T>) -> Result<(), TensorError> {
        if value.shape() != self.value.shape() {
            return Err(mismatch(
                "set_value",
                format!("{}: {:?} vs {:?}", self.name, self.value.shape(), value.shape()),
            ));
        }
        self.value = value;
        Ok(())
    }
}

/// Ordered, named collection of parameters.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    id: u64,
    params: Vec<Parameter<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId {
            store: self.id,
            index: self.params.len() - 1,
        }
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        assert_eq!(id.store, self.id, "parameter id from another store");
        &self.params[id.index]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        assert_eq!(id.store, self.id, "parameter id from another store");
        &mut self.params[id.index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(|index| ParamId {
            store: self.id,
            index,
        })
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Copies of every value, in store order.
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn load_values(&mut self, values: &[Tensor<T>]) -> Result<(), TensorError> {
        if values.len() != self.params.len() {
            return Err(mismatch(
                "load_values",
                format!("{} tensors for {} parameters", values.len(), self.params.len()),
            ));
        }
        if let Some((p, v)) = self
            .params
            .iter()
            .zip(values)
            .find(|(p, v)| p.value.shape() != v.shape())
        {
            return Err(mismatch(
                "load_values",
                format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
            ));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_value_shape() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[2, 3]));
        assert_eq!(store.get(id).grad().shape(), &[2, 3]);
        assert_eq!(store.numel(), 6);
    }

    #[test]
    fn load_values_rejects_shape_change() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(&[2]));
        assert!(store.load_values(&[Tensor::zeros(&[3])]).is_err());
        assert!(store.load_values(&[]).is_err());
        assert!(store.load_values(&[Tensor::full(&[2], 1.0)]).is_ok());
        assert_eq!(store.iter().next().unwrap().value().data(), &[1.0, 1.0]);
    }
}
