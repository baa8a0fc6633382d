//! Named parameter tensors with per-tensor freeze flags.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Mat;

/// Gradients keyed by parameter index in a [`ParamStore`].
pub type Grads = BTreeMap<usize, Mat>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub frozen: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Data(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.index.insert(name.clone(), idx);
        self.entries.push(ParamEntry {
            name,
            value,
            frozen: false,
        });
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.index_of(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Data(format!("missing parameter {name}"))),
        }
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Sets every freeze flag from `frozen(name)`.
    pub fn apply_freeze(&mut self, frozen: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.frozen = frozen(&e.name);
        }
    }

    pub fn frozen_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|e| e.frozen)
            .map(|e| e.name.as_str())
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Rejects non-finite gradients, naming the offending tensor.
    pub fn check_grads(&self, grads: &Grads) -> Result<()> {
        for (&idx, g) in grads {
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}",
                    self.entries[idx].name
                )));
            }
        }
        Ok(())
    }
}

/// Places store tensors on a tape, at most once each. Frozen tensors (or all
/// tensors when `trainable` is false) enter as constants.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Binder {
            store,
            vars: vec![None; store.len()],
            trainable,
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
        if let Some(v) = self.vars[idx] {
            return Ok(v);
        }
        let e = self.store.entry(idx);
        let v = if self.trainable && !e.frozen {
            tape.param(idx, e.value.clone())
        } else {
            tape.constant(e.value.clone())
        };
        self.vars[idx] = Some(v);
        Ok(v)
    }

    /// Embedding-table rows without copying the whole table onto the tape.
    pub fn gather(&mut self, tape: &mut Tape, name: &str, indices: &[usize]) -> Result<Var> {
        let idx = self
            .store
            .index_of(name)
            .ok_or_else(|| Error::Data(format!("missing parameter {name}")))?;
        let e = self.store.entry(idx);
        let param = (self.trainable && !e.frozen).then_some(idx);
        Ok(tape.gather_param(&e.value, param, indices))
    }
}
