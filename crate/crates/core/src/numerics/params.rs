use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Gradients, Graph, NumericsError, Scalar, Tensor, Var};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
///
/// Insertion order is the iteration order everywhere (optimizer, checkpoint,
/// gradient check), which keeps runs deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Normal(0, std) initialization drawn in `f64` and cast, so `f32` and `f64`
    /// stores built from the same RNG stream agree up to rounding.
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId, NumericsError> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).map_err(|_| NumericsError::InvalidInit(std))?;
        let data = (0..n).map(|_| T::from_f64(normal.sample(rng))).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId, NumericsError> {
        self.insert(name, Tensor::full(shape, T::from_f64(value)))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Register every parameter as a graph leaf. `trainable` decides per
    /// parameter whether it receives gradients.
    pub fn bind_with(&self, graph: &mut Graph<T>, mut trainable: impl FnMut(ParamId, &str) -> bool) -> Bindings {
        let vars = self
            .iter()
            .map(|(id, name, t)| graph.leaf(t.clone(), trainable(id, name)))
            .collect();
        Bindings { vars }
    }

    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bindings {
        self.bind_with(graph, |_, _| trainable)
    }

    /// Flattened values in insertion order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrite all values from a flat vector produced by [`Self::flatten`].
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<(), NumericsError> {
        if flat.len() != self.num_scalars() {
            return Err(NumericsError::DataLength {
                shape: vec![self.num_scalars()],
                len: flat.len(),
            });
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

/// Graph leaves for every parameter of a store, produced by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradient per parameter (zeros where no gradient reached).
    pub fn collect_grads<T: Scalar>(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(store.ids())
            .map(|(&v, id)| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect()
    }
}
