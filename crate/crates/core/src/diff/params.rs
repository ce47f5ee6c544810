use std::collections::HashMap;

use rand::Rng;

use super::{DiffError, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug)]
pub struct ParameterStore<F> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> Default for ParameterStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParameterStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on duplicate names, which is a wiring bug.
    pub fn add(&mut self, name: &str, value: Tensor<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    /// Uniform init in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(rng.gen_range(-bound..=bound))).collect();
        self.add(name, Tensor::new(shape, data).expect("shape product"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<F>) -> Result<(), DiffError> {
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "set",
                lhs: cur.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Same names and shapes, values converted.
    pub fn cast<G: Scalar>(&self) -> ParameterStore<G> {
        ParameterStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Accumulated parameter gradients. `None` means the parameter took no part
/// in any backward pass since the last reset.
#[derive(Clone, Debug)]
pub struct GradStore<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new(store: &ParameterStore<F>) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor<F>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn zero(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }
}
