//! Named tensor collections. On disk a checkpoint is a directory holding one
//! `ODT1` file per tensor plus `index.json` listing the names in order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_float_tensor, write_float_tensor, Float, Tensor};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, (Vec<usize>, Vec<Float>)>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    tensors: Vec<String>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.insert(name.into(), (t.shape().to_vec(), t.to_vec()));
    }

    pub fn insert_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<Float>) {
        self.tensors.insert(name.into(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<Float>)> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))
    }

    /// Fetches a tensor and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&[Float]> {
        let (s, d) = self.get(name)?;
        if s != shape {
            return Err(Error::Format(format!("tensor `{name}` has shape {s:?}, expected {shape:?}")));
        }
        Ok(d)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, (shape, data)) in &self.tensors {
            let mut w = BufWriter::new(File::create(dir.join(format!("{name}.odt")))?);
            write_float_tensor(&mut w, shape, data)?;
            w.flush()?;
        }
        let index = Index { tensors: self.tensors.keys().cloned().collect() };
        std::fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Checkpoint> {
        let index: Index = serde_json::from_str(&std::fs::read_to_string(dir.join("index.json"))?)?;
        let mut ck = Checkpoint::default();
        for name in index.tensors {
            let path = dir.join(format!("{name}.odt"));
            let (shape, data) = read_float_tensor(&mut BufReader::new(File::open(&path)?))
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            ck.tensors.insert(name, (shape, data));
        }
        Ok(ck)
    }
}
