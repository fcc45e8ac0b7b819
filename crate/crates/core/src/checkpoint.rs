//! Model checkpoints: a JSON manifest plus raw little-endian f64 tensors.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::RelationId;
use crate::encoder::{EncoderConfig, Model, ParamId};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "model.json";
pub const TENSOR_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    /// Byte offset into the tensor file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: EncoderConfig,
    pub relations: Vec<RelationId>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `model` into `dir` (created if missing).
pub fn save(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    for (id, p) in model.params() {
        tensors.push(TensorEntry {
            name: id.name().to_string(),
            shape: [p.nrows(), p.ncols()],
            dtype: "f64le".into(),
            offset: bytes.len(),
        });
        for x in p.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config().clone(),
        relations: model.relations().to_vec(),
        tensors,
    };
    fs::write(dir.join(TENSOR_FILE), bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Model> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let bytes = fs::read(dir.join(TENSOR_FILE))?;
    let mut params: Vec<Option<Array2<f64>>> = vec![None; ParamId::ALL.len()];
    for t in &manifest.tensors {
        let id = ParamId::from_name(&t.name)
            .ok_or_else(|| Error::validation(format!("unknown tensor '{}'", t.name)))?;
        if t.dtype != "f64le" {
            return Err(Error::validation(format!("unsupported dtype '{}'", t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        let end = t.offset + 8 * n;
        let raw = bytes
            .get(t.offset..end)
            .ok_or_else(|| Error::validation(format!("tensor '{}' runs past the end of the file", t.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params[id.index()] = Some(
            Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("shape matches length"),
        );
    }
    let params = params
        .into_iter()
        .zip(ParamId::ALL)
        .map(|(p, id)| p.ok_or_else(|| Error::validation(format!("missing tensor '{}'", id.name()))))
        .collect::<Result<Vec<_>>>()?;
    Model::from_parts(manifest.config, params, manifest.relations)
}
