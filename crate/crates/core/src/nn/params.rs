use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Scalar count of every parameter whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Replace every tensor, checking names and shapes.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                self.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Per-parameter gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            grads: store.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|v| v.is_finite())
    }
}

/// A tape bound to a parameter store.
///
/// Parameters are placed on the tape lazily, once each, the first time a
/// layer asks for them. In inference mode they are recorded as constants.
pub struct Graph<'s> {
    tape: Tape,
    store: &'s ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, true)
    }

    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_tracking(store, false)
    }

    fn with_tracking(store: &'s ParamStore, track: bool) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            track,
        }
    }

    /// Wrap an existing tape whose leaves `vars` stand for every parameter
    /// of `store`, in order.
    pub fn with_bound(store: &'s ParamStore, tape: Tape, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), store.len(), "one var per parameter");
        Graph {
            tape,
            store,
            bound: vars.iter().copied().map(Some).collect(),
            track: true,
        }
    }

    pub fn into_tape(self) -> Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Backpropagate from a scalar and collect gradients for every
    /// parameter (zeros for parameters the forward pass never touched).
    pub fn backward(&mut self, output: Var) -> Result<Gradients> {
        self.tape.backward(output)?;
        let mut grads = Gradients::zeros(self.store);
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(g) = b.and_then(|v| self.tape.grad(v)) {
                grads.grads[i] = g.into_vec();
            }
        }
        Ok(grads)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;

    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}

/// Generator for one named module, independent of every other module, so
/// that adding or removing a module never perturbs the others' weights.
pub fn module_rng(seed: u64, module: &str) -> ChaCha8Rng {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in module.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Uniform in `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`.
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_draws() {
        let a = uniform_fan_in(&[4, 3], 4, &mut module_rng(5, "layer"));
        let b = uniform_fan_in(&[4, 3], 4, &mut module_rng(5, "layer"));
        assert_eq!(a, b);
        let c = uniform_fan_in(&[4, 3], 4, &mut module_rng(5, "other"));
        assert_ne!(a, c);
    }

    #[test]
    fn fan_in_four_bounds_weights() {
        let w = uniform_fan_in(&[1000], 4, &mut module_rng(0, "w"));
        assert!(w.data().iter().all(|v| v.abs() <= 0.5));
        assert!(w.data().iter().any(|v| v.abs() > 0.4));
    }

    #[test]
    fn graph_binds_each_param_once() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(&[1.0, 2.0]));
        let unused = store.add("u", Tensor::vector(&[3.0]));
        let mut g = Graph::new(&store);
        let a = g.param(id);
        let b = g.param(id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(id), &[2.0, 4.0]);
        assert_eq!(grads.get(unused), &[0.0]);
    }
}
