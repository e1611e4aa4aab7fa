use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::DifferentiableArray;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Leading version integer of serialized parameter snapshots.
pub const SNAPSHOT_FORMAT_VERSION: u32 = 1;

/// Named learnable arrays, iterated in name order.
///
/// Serializes as `{format_version, params: {name: {shape, values}}}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Snapshot", try_from = "Snapshot")]
pub struct ParamSet {
    params: BTreeMap<String, DifferentiableArray>,
}

/// Tape handles of a [`ParamSet`] bound for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("parameter `{name}` is not defined")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    format_version: u32,
    params: BTreeMap<String, DifferentiableArray>,
}

impl From<ParamSet> for Snapshot {
    fn from(p: ParamSet) -> Self {
        Snapshot {
            format_version: SNAPSHOT_FORMAT_VERSION,
            params: p.params,
        }
    }
}

impl TryFrom<Snapshot> for ParamSet {
    type Error = Error;

    fn try_from(snap: Snapshot) -> Result<Self> {
        if snap.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::input(format!(
                "unsupported snapshot format version {}",
                snap.format_version
            )));
        }
        Ok(Self { params: snap.params })
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: DifferentiableArray) {
        self.params.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Option<&DifferentiableArray> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DifferentiableArray> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DifferentiableArray)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DifferentiableArray)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(DifferentiableArray::len).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(DifferentiableArray::zero_grad);
    }

    /// Copy every parameter onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, a)| (k.clone(), tape.param(a)))
                .collect(),
        }
    }

    /// Add the tape gradients of the bound leaves into the parameter buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, var) in bound.iter() {
            if let Some(p) = self.params.get_mut(name) {
                if p.requires_grad() {
                    p.accumulate_grad(&tape.grad(var));
                }
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::input(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::input(format!("parameter snapshot: {e}")))
    }
}
