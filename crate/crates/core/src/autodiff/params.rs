use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::TensorRecord;
use super::{AutodiffError, Graph, Tensor, Var};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct NamedRecord {
    name: String,
    #[serde(flatten)]
    tensor: TensorRecord,
}

#[derive(Serialize, Deserialize)]
struct ParamContainer {
    format: String,
    tensors: Vec<NamedRecord>,
}

const FORMAT: &str = "tabimpute-params/1";

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Records every parameter as a named leaf on `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.iter().map(|(n, t)| g.input(n, t.clone())).collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_json(&self) -> String {
        let container = ParamContainer {
            format: FORMAT.to_string(),
            tensors: self
                .iter()
                .map(|(n, t)| NamedRecord { name: n.to_string(), tensor: t.into() })
                .collect(),
        };
        serde_json::to_string(&container).expect("parameter container serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, AutodiffError> {
        let c: ParamContainer =
            serde_json::from_str(s).map_err(|e| AutodiffError::Layout(e.to_string()))?;
        if c.format != FORMAT {
            return Err(AutodiffError::Layout(format!("unsupported container format `{}`", c.format)));
        }
        let mut out = ParamSet::new();
        for rec in c.tensors {
            out.push(rec.name, Tensor::try_from(rec.tensor)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub fn load(path: &Path) -> Result<Self, AutodiffError> {
        let s = std::fs::read_to_string(path).map_err(|e| AutodiffError::Layout(e.to_string()))?;
        Self::from_json(&s)
    }
}
