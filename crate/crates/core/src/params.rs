//! Named parameter storage with deterministic iteration order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(contract(format!("duplicate parameter id {name}")));
        }
        let (idx, _) = self.params.insert_full(
            name,
            Param {
                value,
                grad: None,
                requires_grad: true,
            },
        );
        Ok(ParamId(idx))
    }

    /// Weight matrix with entries uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::new(fan_in, fan_out, values)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.get_index_of(name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.params.get_index(id.0).map(|(k, _)| k.as_str()).unwrap_or("")
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let p = &mut self.params[id.0];
        match &mut p.grad {
            Some(g) => {
                for (a, b) in g.values_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            None => {
                let [r, c] = p.value.shape();
                p.grad = Some(Tensor::new(r, c, grad.to_vec()).expect("grad shape"));
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        for p in self.params.values_mut() {
            p.requires_grad = flag;
        }
    }

    /// Flat copy of all parameter values, in store order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .values()
            .flat_map(|p| p.value.values().iter().copied())
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            params: self
                .params
                .iter()
                .map(|(name, p)| CheckpointEntry {
                    name: name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(contract(format!("unknown checkpoint format {}", ck.format)));
        }
        let mut store = ParamStore::new();
        for e in &ck.params {
            if e.shape.len() != 2 {
                return Err(contract(format!("parameter {} must be 2-d", e.name)));
            }
            store.insert(&e.name, Tensor::new(e.shape[0], e.shape[1], e.values.clone())?)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Self::from_checkpoint(&ck)
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(contract("parameter sets differ"));
        }
        for ((n1, a), (n2, b)) in self.params.iter_mut().zip(other.params.iter()) {
            if n1 != n2 || a.value.shape() != b.value.shape() {
                return Err(contract(format!("parameter mismatch {n1} vs {n2}")));
            }
            a.value = b.value.clone();
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "hierenv-params/1";

/// Self-describing JSON checkpoint: a flat list of `(name, shape, values)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub params: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}
