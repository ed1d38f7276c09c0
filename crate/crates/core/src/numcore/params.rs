use std::collections::BTreeMap;
use std::sync::Arc;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{config_err, contract_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    /// Per-element frozen flags; `None` means fully learnable.
    pub frozen: Option<Arc<Vec<bool>>>,
}

impl Param {
    pub fn learnable_count(&self) -> usize {
        match &self.frozen {
            Some(m) => m.iter().filter(|f| !**f).count(),
            None => self.value.len(),
        }
    }
}

/// Named parameters, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
    pub rng_seed: u64,
}

impl ParamStore {
    pub fn new(rng_seed: u64) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            rng_seed,
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_masked(name, value, None)
    }

    pub fn insert_masked(&mut self, name: &str, value: Tensor, frozen: Option<Vec<bool>>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(config_err!("duplicate parameter name `{name}`"));
        }
        if let Some(m) = &frozen {
            if m.len() != value.len() {
                return Err(contract_err!(
                    "mask for `{name}` has {} entries, tensor has {}",
                    m.len(),
                    value.len()
                ));
            }
        }
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                frozen: frozen.map(Arc::new),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| contract_err!("no parameter named `{name}`"))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| contract_err!("no parameter named `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Learnable element count over names starting with `prefix`.
    pub fn learnable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.learnable_count())
            .sum()
    }

    /// Put every parameter on `tape` as a named leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(n, p)| (n.clone(), tape.param(n, p.value.clone(), p.frozen.clone())))
            .collect();
        BoundParams { vars }
    }
}

/// Tape handles for a bound [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        BoundParams { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("parameter `{name}` is not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }
}
