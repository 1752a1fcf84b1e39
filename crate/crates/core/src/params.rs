//! Named parameter storage and binding of parameters onto a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::autograd::{Gradients, Graph, Var};
use crate::config::{Init, ParamGroup, ParamSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    value: Arc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every entry of `layout` in order.
    pub fn from_layout<R: Rng + ?Sized>(layout: &[ParamSpec], std: f64, rng: &mut R) -> Self {
        let mut store = Self::new();
        for spec in layout {
            let t = match spec.init {
                Init::Normal => Tensor::randn(&spec.shape, std, rng),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::filled(&spec.shape, 1.0),
            };
            store.add(&spec.name, spec.group, t);
        }
        store
    }

    pub fn add(&mut self, name: &str, group: ParamGroup, value: Tensor) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter `{name}`");
        let id = ParamId(self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            value: Arc::new(value),
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no parameter named `{name}`")))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.get(id).shape() {
            return Err(Error::dim("ParamStore::set", self.get(id).shape(), value.shape()));
        }
        self.params[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Per-parameter gradient buffers, `None` for parameters that received none.
#[derive(Clone, Debug)]
pub struct ParamGrads(pub Vec<Option<Vec<f64>>>);

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(vec![None; store.len()])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.0[id.0].as_deref()
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// A tape plus lazily created leaves for the parameters it touches.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    trainable: Option<&'a [bool]>,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    /// `trainable == None` binds every parameter as a constant (inference).
    pub fn new(store: &'a ParamStore, trainable: Option<&'a [bool]>) -> Self {
        if let Some(t) = trainable {
            assert_eq!(t.len(), store.len(), "trainable mask length");
        }
        Self {
            graph: Graph::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = self.trainable.is_some_and(|t| t[id.0]);
        let v = self.graph.leaf(self.store.arc(id), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads = self.graph.backward(loss)?;
        Ok(self.collect(&mut grads))
    }

    fn collect(&self, grads: &mut Gradients) -> ParamGrads {
        ParamGrads(self.bound.iter().map(|b| b.and_then(|v| grads.take(v))).collect())
    }
}
