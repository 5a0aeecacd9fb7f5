use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Which part of the model a parameter tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Decoder,
    PhonemeTable,
    SpeakerTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: ParamGroup, value: Tensor<T>) {
        if let Some(&i) = self.index.get(name) {
            self.params[i] = Param {
                name: name.to_string(),
                group,
                value,
            };
            return;
        }
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            group,
            value,
        });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.index
            .get(name)
            .map(|&i| &self.params[i].value)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].value),
            None => Err(Error::UnknownParameter(name.to_string())),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.name.clone())
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter as a trainable leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        Bound {
            names: self.index.clone(),
            vars,
        }
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        let vars = self.params.iter().map(|p| tape.constant(p.value.clone())).collect();
        Bound {
            names: self.index.clone(),
            vars,
        }
    }

    pub fn zeros_like(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Parameters recorded on a tape, addressable by name.
pub struct Bound<'t, T: Real> {
    names: BTreeMap<String, usize>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    /// Binds externally created variables; `names[i]` labels `vars[i]`.
    pub fn from_vars(names: &[String], vars: Vec<Var<'t, T>>) -> Self {
        Bound {
            names: names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect(),
            vars,
        }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>> {
        self.names
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Per-parameter gradients laid out like `store`. Parameters that did
    /// not take part in the loss get zeros.
    pub fn gradients(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> ParamStore<T> {
        let mut out = store.zeros_like();
        for p in out.iter_mut() {
            if let Some(&i) = self.names.get(&p.name) {
                if let Some(g) = grads.get(self.vars[i]) {
                    p.value = g.clone();
                }
            }
        }
        out
    }
}

/// Per-tensor and per-row freeze directives for one training phase.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePlan {
    pub frozen_tensors: BTreeSet<String>,
    pub frozen_rows: BTreeMap<String, BTreeSet<usize>>,
}

impl FreezePlan {
    pub fn is_empty(&self) -> bool {
        self.frozen_tensors.is_empty() && self.frozen_rows.values().all(BTreeSet::is_empty)
    }

    pub fn validate<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        for name in &self.frozen_tensors {
            params.get(name)?;
            if self.frozen_rows.contains_key(name) {
                return Err(Error::Validation(format!(
                    "{name} is frozen whole and per row"
                )));
            }
        }
        for (name, rows) in &self.frozen_rows {
            let t = params.get(name)?;
            if let Some(&r) = rows.iter().next_back() {
                if r >= t.rows() {
                    return Err(Error::Validation(format!(
                        "frozen row {r} out of range for {name} with {} rows",
                        t.rows()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_tensor_frozen(&self, name: &str) -> bool {
        self.frozen_tensors.contains(name)
    }

    pub fn frozen_rows_of(&self, name: &str) -> Option<&BTreeSet<usize>> {
        self.frozen_rows.get(name).filter(|rows| !rows.is_empty())
    }

    /// Zeroes the frozen entries of `grads` in place.
    pub fn mask<T: Real>(&self, grads: &mut ParamStore<T>) {
        for p in grads.iter_mut() {
            if self.is_tensor_frozen(&p.name) {
                p.value.data_mut().fill(T::zero());
            } else if let Some(rows) = self.frozen_rows_of(&p.name) {
                for &r in rows {
                    p.value.row_slice_mut(r).fill(T::zero());
                }
            }
        }
    }
}
