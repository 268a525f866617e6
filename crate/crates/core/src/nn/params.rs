//! Named parameter registry and the per-forward binding context.

use std::cell::RefCell;

use indexmap::IndexMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is checkpointed but not trained (batch-norm running stats).
    Buffer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered registry of every tensor a network owns, keyed by dotted path
/// (e.g. `enc1.conv1.weight`).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, (ParamKind, Tensor<T>)>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        let (id, _) = self.entries.insert_full(name, (kind, value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].1
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id].0
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id).map(|(k, _)| k.as_str()).expect("param id in range")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|(_, t)| t)
    }

    /// Entries in registration order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, ParamKind, &Tensor<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (name, (kind, t)))| (i, name.as_str(), *kind, t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &str, &mut Tensor<T>)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, (name, (_, t)))| (i, name.as_str(), t))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, _, kind, _)| *kind == ParamKind::Trainable)
            .map(|(id, ..)| id)
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.iter()
            .filter(|(_, _, kind, _)| *kind == ParamKind::Trainable)
            .map(|(.., t)| t.numel())
            .sum()
    }
}

/// Binds a [`ParamStore`] to a [`Tape`] for one forward pass.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a Tape<T>,
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    stat_updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'a, T: Element> Ctx<'a, T> {
    /// Registers every trainable parameter as a tape leaf.
    pub fn bind(tape: &'a Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        let vars = store
            .iter()
            .map(|(_, _, kind, t)| (kind == ParamKind::Trainable).then(|| tape.leaf(t.clone())))
            .collect();
        Ctx {
            tape,
            store,
            vars,
            mode,
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    /// Uses caller-provided vars for trainable parameters (`None` for buffers).
    pub fn with_vars(tape: &'a Tape<T>, store: &'a ParamStore<T>, vars: Vec<Option<Var>>, mode: Mode) -> Self {
        assert_eq!(vars.len(), store.len(), "one var slot per registry entry");
        Ctx {
            tape,
            store,
            vars,
            mode,
            stat_updates: RefCell::new(Vec::new()),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id].unwrap_or_else(|| panic!("parameter {} is not bound", self.store.name(id)))
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        self.store.get(id)
    }

    /// Bound (param id, var) pairs in registry order.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(id, v)| v.map(|v| (id, v)))
            .collect()
    }

    pub(crate) fn record_stat(&self, id: ParamId, value: Tensor<T>) {
        self.stat_updates.borrow_mut().push((id, value));
    }

    /// Buffer updates produced during the pass, to be applied by the owner.
    pub fn take_stat_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.stat_updates.borrow_mut())
    }
}
