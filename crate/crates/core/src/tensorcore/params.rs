use indexmap::IndexMap;

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Registers every parameter as a differentiable leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        self.bind_with(graph, true)
    }

    /// Registers every parameter as a constant of `graph`.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph) -> BoundParams<'g> {
        self.bind_with(graph, false)
    }

    fn bind_with<'g>(&self, graph: &'g Graph, trainable: bool) -> BoundParams<'g> {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| {
                let var = if trainable { graph.param(v.clone()) } else { graph.constant(v.clone()) };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }
}

/// Parameters bound into one graph.
pub struct BoundParams<'g> {
    vars: IndexMap<String, Var<'g>>,
}

impl<'g> BoundParams<'g> {
    /// Binds already-created variables under the given names.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var<'g>)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Gradients in store order; zero for parameters the loss ignores.
    pub fn grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars
            .values()
            .map(|v| match grads.wrt(*v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(&v.shape()),
            })
            .collect()
    }
}
