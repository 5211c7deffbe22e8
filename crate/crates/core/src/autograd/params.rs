use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{cast, Scalar};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<F> {
    pub name: String,
    pub value: Arc<Array2<F>>,
    pub trainable: bool,
}

/// Named, ordered collection of 2-D parameter matrices.
///
/// Values sit behind `Arc` so a forward pass can reference them without
/// copying; the optimizer mutates them in place once no tape holds a
/// reference.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    index: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
        });
        id
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let value = Array2::from_shape_simple_fn(shape, || {
            let z: f64 = StandardNormal.sample(rng);
            cast::<F>(z * std)
        });
        self.add(name, value, trainable)
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fill: f64,
        trainable: bool,
    ) -> ParamId {
        self.add(name, Array2::from_elem(shape, cast::<F>(fill)), trainable)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.params[id.0].value
    }

    pub fn get_arc(&self, id: ParamId) -> Arc<Array2<F>> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn param(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Mutable access; clones the matrix first if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Array2<F>) {
        assert_eq!(self.params[id.0].value.dim(), value.dim());
        self.params[id.0].value = Arc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Converts every parameter to another float type.
    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let params = self
            .params
            .iter()
            .map(|p| Param {
                name: p.name.clone(),
                value: Arc::new(p.value.mapv(|v| cast::<G>(v.to_f64().unwrap_or(f64::NAN)))),
                trainable: p.trainable,
            })
            .collect();
        ParamStore {
            params,
            index: self.index.clone(),
        }
    }
}

/// Parameter gradients keyed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<F> {
    grads: BTreeMap<ParamId, Array2<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn new() -> Self {
        Self {
            grads: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.grads.get(&id)
    }

    pub fn accumulate(&mut self, id: ParamId, grad: Array2<F>) {
        match self.grads.get_mut(&id) {
            Some(existing) => *existing += &grad,
            None => {
                self.grads.insert(id, grad);
            }
        }
    }

    pub fn merge(&mut self, other: Gradients<F>) {
        for (id, g) in other.grads {
            self.accumulate(id, g);
        }
    }

    pub fn scale(&mut self, factor: F) {
        for g in self.grads.values_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<F>)> + '_ {
        self.grads.iter().map(|(id, g)| (*id, g))
    }
}
