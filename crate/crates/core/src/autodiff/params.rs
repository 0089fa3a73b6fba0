use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param { name, value, grad });
        ParamId(self.params.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the parameter gradients of a backward pass into `grad` buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            if let Some(g) = g {
                self.params[id.0].grad.add_assign(g);
            }
        }
    }

    /// Total parameter count (scalars).
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn to_file(&self) -> ParamFile {
        ParamFile {
            format: PARAM_FORMAT.to_string(),
            version: PARAM_VERSION,
            params: self
                .params
                .iter()
                .map(|p| ParamEntry {
                    path: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Overwrites values from a parameter file; every stored path must be
    /// present in the file with the same shape.
    pub fn load_values(&mut self, file: &ParamFile) -> Result<()> {
        file.check_header()?;
        let entries: BTreeMap<&str, &ParamEntry> =
            file.params.iter().map(|e| (e.path.as_str(), e)).collect();
        for p in &mut self.params {
            let entry = entries
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {}", p.name)))?;
            if entry.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?}, file holds {:?}",
                    p.name,
                    p.value.shape(),
                    entry.shape
                )));
            }
            p.value = Tensor::new(entry.shape.clone(), entry.values.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a store from a parameter file, keeping file order.
    pub fn from_file(file: &ParamFile) -> Result<Self> {
        file.check_header()?;
        let mut store = ParamStore::new();
        for e in &file.params {
            store.add(e.path.clone(), Tensor::new(e.shape.clone(), e.values.clone())?);
        }
        Ok(store)
    }
}

pub const PARAM_FORMAT: &str = "contig-params";
pub const PARAM_VERSION: u32 = 1;

/// Serialized parameter container.
///
/// JSON object `{"format": "contig-params", "version": 1, "params": [...]}`
/// where each entry is `{"path": "...", "shape": [...], "values": [...]}`
/// with row-major values. Floats are written in shortest round-trip form,
/// so values reload bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamFile {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParamFile {
    fn check_header(&self) -> Result<()> {
        if self.format != PARAM_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", self.format)));
        }
        if self.version != PARAM_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported parameter file version {}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
