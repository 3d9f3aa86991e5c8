use super::tensor::Tensor;

/// Index of a parameter inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named model parameter: value, accumulated gradient, trainability.
///
/// The gradient always has the same shape as the value. Optimizers must never
/// apply the gradient of a non-trainable parameter.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter {
            name: name.into(),
            value,
            grad,
            trainable,
        }
    }
}

/// Flat arena of parameters addressed by [`ParamId`].
///
/// Model components hold ids into the arena; the trainer and the gradient
/// checker iterate it directly.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    items: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let id = ParamId(self.items.len());
        self.items.push(Parameter::new(name, value, trainable));
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.items[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.items[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.items.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.items
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.items.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in self.items.iter_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.items.iter_mut() {
            p.trainable = trainable;
        }
    }

    /// Total scalar count across all parameters.
    pub fn total_scalar_count(&self) -> usize {
        self.items.iter().map(|p| p.value.numel()).sum()
    }

    /// Scalar count across trainable parameters only.
    pub fn trainable_scalar_count(&self) -> usize {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.items
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.name.clone())
            .collect()
    }

    /// Clone all parameter values (for best-epoch snapshots).
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.items.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.items.len(), "snapshot size mismatch");
        for (p, s) in self.items.iter_mut().zip(snapshot.iter()) {
            p.value = s.clone();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_shape_matches_value() {
        let mut set = ParamSet::new();
        let id = set.add("w", Tensor::zeros(vec![2, 3]), true);
        let p = set.get(id);
        assert_eq!(p.value.shape(), p.grad.shape());
    }

    #[test]
    fn counts_distinguish_trainable() {
        let mut set = ParamSet::new();
        set.add("a", Tensor::zeros(vec![2, 3]), true);
        set.add("b", Tensor::zeros(vec![4]), false);
        assert_eq!(set.total_scalar_count(), 10);
        assert_eq!(set.trainable_scalar_count(), 6);
        assert_eq!(set.trainable_names(), vec!["a".to_string()]);
    }

    #[test]
    fn snapshot_roundtrip() {
        let mut set = ParamSet::new();
        let id = set.add("a", Tensor::filled(vec![2], 1.5), true);
        let snap = set.snapshot_values();
        set.get_mut(id).value.data_mut()[0] = 9.0;
        set.restore_values(&snap);
        assert_eq!(set.get(id).value.data()[0], 1.5);
    }
}
