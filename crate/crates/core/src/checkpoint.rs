//! Parameter checkpoint files.
//!
//! Layout: one line of JSON, a list of `{"name", "shape", "offset"}` entries
//! where `offset` counts `f64` elements from the start of the data block,
//! then `\n`, then every tensor's elements as little-endian `f64`, packed in
//! entry order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::ParamLayout;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    layout: &ParamLayout,
    values: &[f64],
) -> std::io::Result<()> {
    assert_eq!(layout.total(), values.len(), "values must match the layout");
    let entries: Vec<TensorEntry> = layout
        .views()
        .iter()
        .map(|v| TensorEntry {
            name: v.name.clone(),
            shape: v.shape.clone(),
            offset: v.offset,
        })
        .collect();
    let header = serde_json::to_string(&entries).expect("entries serialize");
    w.write_all(header.as_bytes())?;
    w.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<Vec<NamedTensor>, CheckpointError> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header).map_err(|e| CheckpointError::Io {
        path: "<reader>".into(),
        source: e,
    })?;
    let entries: Vec<TensorEntry> = serde_json::from_str(header.trim_end())?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| CheckpointError::Io {
        path: "<reader>".into(),
        source: e,
    })?;
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Format(format!(
            "data block of {} bytes is not a whole number of f64",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut out = Vec::with_capacity(entries.len());
    for e in entries {
        let len: usize = e.shape.iter().product();
        let end = e.offset.checked_add(len).filter(|&end| end <= data.len());
        let Some(end) = end else {
            return Err(CheckpointError::Format(format!(
                "tensor {} extends past the data block",
                e.name
            )));
        };
        out.push(NamedTensor {
            name: e.name,
            shape: e.shape,
            data: data[e.offset..end].to_vec(),
        });
    }
    Ok(out)
}

pub fn save(path: &Path, layout: &ParamLayout, values: &[f64]) -> Result<(), CheckpointError> {
    let io = |e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let f = std::fs::File::create(path).map_err(io)?;
    write_checkpoint(std::io::BufWriter::new(f), layout, values).map_err(io)
}

pub fn load(path: &Path) -> Result<Vec<NamedTensor>, CheckpointError> {
    let f = std::fs::File::open(path).map_err(|e| CheckpointError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    read_checkpoint(f)
}

/// Packs `tensors` into a flat vector following `layout`, matching by name
/// and shape.
pub fn unpack(layout: &ParamLayout, tensors: &[NamedTensor]) -> Result<Vec<f64>, CheckpointError> {
    let mut values = vec![0.0; layout.total()];
    for view in layout.views() {
        let t = tensors
            .iter()
            .find(|t| t.name == view.name)
            .ok_or_else(|| CheckpointError::Format(format!("missing tensor {}", view.name)))?;
        if t.shape != view.shape {
            return Err(CheckpointError::Format(format!(
                "tensor {} has shape {:?}, expected {:?}",
                view.name, t.shape, view.shape
            )));
        }
        values[view.range()].copy_from_slice(&t.data);
    }
    Ok(values)
}
