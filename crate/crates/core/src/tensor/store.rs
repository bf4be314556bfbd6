use crate::error::{Error, Result};
use crate::tensor::matrix::Matrix;
use crate::tensor::tape::{Tape, Var};
use indexmap::IndexMap;

/// Named parameter with a trainable flag. Only trainable parameters receive
/// optimizer updates and appear in gradient maps.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

/// Name -> parameter mapping. Insertion order is stable, which keeps
/// checkpoints and gradient walks deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Param { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    /// Set trainable flags from a predicate over parameter names.
    pub fn set_trainable_where<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, p) in self.entries.iter_mut() {
            p.trainable = pred(name);
        }
    }

    /// Push every parameter onto a fresh tape and return the name -> Var map
    /// for this forward pass.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = IndexMap::new();
        for (name, p) in &self.entries {
            let v = tape.leaf(p.value.clone());
            vars.insert(name.clone(), v);
        }
        Bound { vars }
    }

    /// Snapshot of all values, for bitwise freeze checks.
    pub fn snapshot(&self) -> IndexMap<String, Matrix> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.value.clone()))
            .collect()
    }
}

/// Per-tape binding of parameter names to tape leaves.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("parameter {name} not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Collect gradients for every trainable parameter after a backward pass.
/// Untouched trainable parameters map to zero matrices of matching shape.
pub fn gradient_map(tape: &Tape, store: &ParamStore, bound: &Bound) -> IndexMap<String, Matrix> {
    let mut out = IndexMap::new();
    for (name, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        if let Ok(var) = bound.var(name) {
            out.insert(name.clone(), tape.grad(var).clone());
        }
    }
    out
}
