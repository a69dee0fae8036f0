//! Named parameter storage and its binding onto a [`Graph`] for one step.

use std::collections::HashMap;

use crate::scalar::Scalar;
use crate::tensor::{Graph, Init, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in the owning store.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

/// Deterministic 64-bit seed for a named parameter, stable across builds.
pub fn derive_seed(base: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h ^ splitmix(base))
}

pub fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter. Panics on a duplicate name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.names.len() - 1)
    }

    /// He-uniform weight, `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, seeded from the name.
    pub fn add_he(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) -> Result<ParamId> {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::construct(
            shape,
            Init::Uniform {
                seed: derive_seed(seed, name),
                lo: -bound,
                hi: bound,
            },
        )?;
        Ok(self.add(name, t))
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        let t = Tensor::construct(shape, Init::Constant(value))?;
        Ok(self.add(name, t))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
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

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Moves every parameter accepted by `select` onto the graph as a trainable leaf.
    /// The store holds empty placeholders for them until [`ParamStore::unbind`].
    pub fn bind(&mut self, g: &mut Graph<T>, mut select: impl FnMut(&str) -> bool) -> Bound {
        let mut vars = vec![None; self.names.len()];
        for (i, name) in self.names.iter().enumerate() {
            if select(name) {
                let t = std::mem::replace(&mut self.tensors[i], Tensor::scalar(T::zero()));
                vars[i] = Some(g.param(t));
            }
        }
        Bound { vars }
    }

    /// Copies every selected parameter onto the graph, leaving the store intact.
    pub fn bind_copy(&self, g: &mut Graph<T>, mut select: impl FnMut(&str) -> bool) -> Bound {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| select(name).then(|| g.param(t.clone())))
            .collect();
        Bound { vars }
    }

    /// Returns moved parameters to the store and hands back their gradients.
    pub fn unbind(&mut self, g: &mut Graph<T>, bound: &Bound) -> Vec<Option<Vec<T>>> {
        let mut grads = vec![None; self.names.len()];
        for (i, v) in bound.vars.iter().enumerate() {
            if let Some(v) = v {
                let (t, grad) = g.take_leaf(*v);
                self.tensors[i] = t;
                grads[i] = grad;
            }
        }
        grads
    }
}

/// Parameter-to-graph mapping produced by [`ParamStore::bind`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Graph handle for a bound parameter. Panics if the parameter was not selected.
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("parameter not bound on this graph")
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.vars[id.0].is_some()
    }

    pub fn bound_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_some())
            .map(|(i, _)| ParamId(i))
    }
}
