//! Named trainable parameters.
//!
//! Blocks declare what they need into a [`Registry`] when the architecture
//! is built; [`Registry::initialize`] turns the declarations into a
//! [`ParamStore`]. During a forward pass a [`Ctx`] binds every stored tensor
//! onto the tape so blocks can look parameters up by name.

use std::collections::HashMap;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Initial slope of every PReLU.
pub const PRELU_INIT: f64 = 0.25;

/// RNG stream reserved for parameter initialization.
pub const INIT_STREAM: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-uniform over fan-in with the leaky-ReLU gain for slope [`PRELU_INIT`].
    KaimingUniform { fan_in: usize },
    Zeros,
    Const(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered parameter declarations of an architecture.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    decls: Vec<ParamDecl>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a parameter and returns its name. Panics on a duplicate name,
    /// which can only come from a wiring bug.
    pub fn declare(&mut self, name: String, shape: Vec<usize>, init: Init) -> String {
        assert!(
            !self.decls.iter().any(|d| d.name == name),
            "parameter `{name}` declared twice"
        );
        self.decls.push(ParamDecl {
            name: name.clone(),
            shape,
            init,
        });
        name
    }

    pub fn decls(&self) -> &[ParamDecl] {
        &self.decls
    }

    pub fn total_elements(&self) -> usize {
        self.decls.iter().map(|d| d.shape.iter().product::<usize>()).sum()
    }

    pub fn initialize(&self, seed: u64) -> ParamStore<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let gain = (2.0 / (1.0 + PRELU_INIT * PRELU_INIT)).sqrt();
        let mut store = ParamStore::new();
        for d in &self.decls {
            let n: usize = d.shape.iter().product();
            let data: Vec<f32> = match d.init {
                Init::KaimingUniform { fan_in } => {
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                }
                Init::Zeros => vec![0.0; n],
                Init::Const(v) => vec![v as f32; n],
            };
            let t = Tensor::new(d.shape.clone(), data).expect("declared shape");
            store.insert(&d.name, t).expect("unique names");
        }
        store
    }

    /// Every declared parameter is present once with its declared shape, and nothing else.
    pub fn validate<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        for d in &self.decls {
            let t = store.get(&d.name)?;
            if t.shape() != d.shape.as_slice() {
                return Err(Error::config(format!(
                    "parameter `{}` has shape {:?}, architecture expects {:?}",
                    d.name,
                    t.shape(),
                    d.shape
                )));
            }
        }
        if store.len() != self.decls.len() {
            let extra: Vec<_> = store
                .names()
                .filter(|n| !self.decls.iter().any(|d| d.name == *n))
                .collect();
            return Err(Error::config(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }
}

/// Ordered map from parameter name to tensor. Iteration order is insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::config(format!("parameter name collision `{name}`")));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Accumulates the gradients of every parameter bound on `tape` into the
    /// matching tensors' grad slots.
    pub fn absorb_grads(&mut self, tape: &Tape<T>, grads: &Gradients<T>) -> Result<()> {
        for (name, var) in tape.params() {
            if let Some(g) = grads.get(var) {
                self.get_mut(&name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Element-wise overwrite, keeping grads untouched. Used to fabricate parameters in tests and demos.
    pub fn set(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let t = self.get_mut(name)?;
        if data.len() != t.numel() {
            return Err(Error::dim(
                "set",
                format!("{} values for `{name}` of shape {:?}", data.len(), t.shape()),
            ));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn fill(&mut self, name: &str, value: f64) -> Result<()> {
        let t = self.get_mut(name)?;
        t.data_mut().fill(T::lit(value));
        Ok(())
    }
}

/// Parameters bound onto one tape.
pub struct Ctx<'t, T: Real = f32> {
    tape: &'t Tape<T>,
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Ctx<'t, T> {
    /// Binds every parameter of `store` onto `tape`, in store order.
    pub fn new(tape: &'t Tape<T>, store: &ParamStore<T>) -> Result<Self> {
        let mut vars = HashMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            vars.insert(name.to_string(), tape.param(name, t)?);
        }
        Ok(Ctx { tape, vars })
    }

    /// Uses already-recorded variables as parameters.
    pub fn from_bound(tape: &'t Tape<T>, names: &[String], vars: &[Var<'t, T>]) -> Self {
        Ctx {
            tape,
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn p(&self, name: &str) -> Result<Var<'t, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` not bound")))
    }
}
