use std::collections::HashMap;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Moving batch-norm statistics; updated by forward passes in train mode.
    Statistic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

/// Ordered, named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: layouts are fixed at construction.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> usize {
        let name = name.into();
        let i = self.entries.len();
        let prev = self.index.insert(name.clone(), i);
        assert!(prev.is_none(), "duplicate parameter {name}");
        self.entries.push(Param { name, value, kind });
        i
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].value)
    }

    pub fn entry(&self, i: usize) -> &Param {
        &self.entries[i]
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.position(name)?;
        Some(&mut self.entries[i].value)
    }

    /// Indices of optimizer-visible entries, in store order.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&i| self.entries[i].kind == ParamKind::Trainable)
            .collect()
    }

    /// Total number of scalar trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.trainable()
            .iter()
            .map(|&i| self.entries[i].value.len())
            .sum()
    }

    /// Rounds every value to the nearest `f32`, the checkpoint precision.
    pub fn snap_f32(&mut self) {
        for p in &mut self.entries {
            snap_f32(p.value.data_mut());
        }
    }

    /// Registers every entry on `tape`. Trainable entries become gradient
    /// leaves unless `frozen`; statistics are always constants.
    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|p| match p.kind {
                ParamKind::Trainable => Some(tape.leaf(p.value.clone(), !frozen)),
                ParamKind::Statistic => None,
            })
            .collect();
        Bound { vars }
    }
}

pub fn snap_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

/// Tape variables for a [`ParamStore`], indexed like the store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    /// Binds explicit variables, one slot per store entry.
    pub fn from_vars(vars: Vec<Option<Var>>) -> Self {
        Self { vars }
    }

    /// The tape variable of a trainable entry.
    pub fn var(&self, i: usize) -> Var {
        self.vars[i].expect("statistic entries are not bound")
    }

    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    /// `(store index, var)` for every bound entry.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}
