//! Versioned JSON tensor container shared by backends and SAEs.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::transformer::{Layout, ToyTransformer, TransformerConfig};
use crate::error::{AuditError, Result};

pub const FORMAT: &str = "biasaudit-tensors";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint { format: FORMAT.into(), version: VERSION, kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(AuditError::Contract(format!("tensor `{name}`: shape {shape:?} does not match {} values", data.len())));
        }
        self.tensors.push(TensorRecord { name, shape, data });
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name).ok_or_else(|| AuditError::Lookup(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn write<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer(sink, self)?;
        Ok(())
    }

    pub fn read<R: Read>(source: R, kind: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_reader(source)?;
        if c.format != FORMAT || c.version != VERSION {
            return Err(AuditError::Contract(format!("unsupported checkpoint {} v{}", c.format, c.version)));
        }
        if c.kind != kind {
            return Err(AuditError::Contract(format!("expected a `{kind}` checkpoint, found `{}`", c.kind)));
        }
        Ok(c)
    }
}

pub fn transformer_checkpoint(model: &ToyTransformer) -> Result<Checkpoint> {
    let mut c = Checkpoint::new("toy-transformer", serde_json::to_value(model.config)?);
    for (name, off, shape) in model.layout().tensors(&model.config) {
        let n: usize = shape.iter().product();
        c.push(name, shape, model.params[off..off + n].to_vec())?;
    }
    Ok(c)
}

pub fn transformer_from_checkpoint(c: &Checkpoint) -> Result<ToyTransformer> {
    let config: TransformerConfig = serde_json::from_value(c.meta.clone())?;
    let layout = Layout::new(&config);
    let mut params = vec![0.0; layout.total];
    for (name, off, shape) in layout.tensors(&config) {
        let t = c.tensor(&name)?;
        if t.shape != shape {
            return Err(AuditError::Contract(format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape)));
        }
        params[off..off + t.data.len()].copy_from_slice(&t.data);
    }
    ToyTransformer::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transformer_round_trip_is_exact() {
        let m = ToyTransformer::init(TransformerConfig { vocab: 9, width: 8, depth: 2, mlp_hidden: 8, max_len: 12 }, 4);
        let mut buf = Vec::new();
        transformer_checkpoint(&m).unwrap().write(&mut buf).unwrap();
        let back = transformer_from_checkpoint(&Checkpoint::read(buf.as_slice(), "toy-transformer").unwrap()).unwrap();
        assert_eq!(back.params, m.params);
        assert!(Checkpoint::read(buf.as_slice(), "sae").is_err());
    }
}
