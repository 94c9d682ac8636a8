use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_table, join_container, split_container, FormatError, TableEntry};
use crate::data::{FeatureBundle, Mask};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const BUNDLE_MAGIC: &str = "SSVPFEAT";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BundleHeader {
    tensors: Vec<TensorRecord>,
    grid: [usize; 2],
    label: u8,
    category: String,
    has_mask: bool,
    #[serde(default)]
    source_id: String,
}

fn push_f32(payload: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes a bundle; values are stored as 32-bit floats.
pub fn encode_bundle(b: &FeatureBundle) -> Result<Vec<u8>> {
    b.validate()?;
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, values: &[f64]| {
        tensors.push(TensorRecord { name, dtype: "f32".into(), shape, offset: payload.len() });
        push_f32(&mut payload, values);
    };
    add("clip_global".into(), vec![b.d_clip()], b.clip_global.data());
    for (l, t) in b.clip_locals.iter().enumerate() {
        add(format!("clip_local_{l}"), vec![t.rows(), t.cols()], t.data());
    }
    add("dino_global".into(), vec![b.d_dino()], b.dino_global.data());
    for (l, t) in b.dino_locals.iter().enumerate() {
        add(format!("dino_local_{l}"), vec![t.rows(), t.cols()], t.data());
    }
    if let Some(m) = &b.mask {
        add("gt_mask".into(), vec![m.height, m.width], &m.to_f64());
    }
    let header = BundleHeader {
        tensors,
        grid: [b.grid.0, b.grid.1],
        label: b.label,
        category: b.category.clone(),
        has_mask: b.mask.is_some(),
        source_id: b.source_id.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    Ok(join_container(BUNDLE_MAGIC, BUNDLE_VERSION, &header, &payload))
}

fn as_matrix(name: &str, shape: &[usize], data: Vec<f64>) -> std::result::Result<Tensor, FormatError> {
    let (r, c) = match *shape {
        [n] => (1, n),
        [r, c] => (r, c),
        _ => return Err(FormatError::ShapeInconsistent(format!("`{name}` has rank {}", shape.len()))),
    };
    Tensor::new(r, c, data).map_err(|e| FormatError::ShapeInconsistent(e.to_string()))
}

pub fn decode_bundle(bytes: &[u8]) -> Result<FeatureBundle> {
    let (header, payload) = split_container(bytes, BUNDLE_MAGIC, BUNDLE_VERSION)?;
    let header: BundleHeader = serde_json::from_slice(header).map_err(|e| FormatError::BadHeader(e.to_string()))?;
    if let Some(t) = header.tensors.iter().find(|t| t.dtype != "f32") {
        return Err(FormatError::BadHeader(format!("`{}` has dtype {:?}, only f32 is supported", t.name, t.dtype)).into());
    }
    let table: Vec<TableEntry> = header
        .tensors
        .iter()
        .map(|t| TableEntry { name: t.name.clone(), shape: t.shape.clone(), offset: t.offset })
        .collect();
    check_table(&table, payload.len(), 4)?;

    let mut by_name: BTreeMap<&str, Tensor> = BTreeMap::new();
    for t in &table {
        let n: usize = t.shape.iter().product();
        let data = payload[t.offset..t.offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        if by_name.insert(&t.name, as_matrix(&t.name, &t.shape, data)?).is_some() {
            return Err(FormatError::BadHeader(format!("duplicate tensor `{}`", t.name)).into());
        }
    }
    let mut take = |name: &str| by_name.remove(name).ok_or_else(|| FormatError::MissingTensor(name.to_string()));
    let clip_global = take("clip_global")?;
    let dino_global = take("dino_global")?;
    let mut clip_locals = Vec::new();
    while let Ok(t) = take(&format!("clip_local_{}", clip_locals.len())) {
        clip_locals.push(t);
    }
    if clip_locals.is_empty() {
        return Err(FormatError::MissingTensor("clip_local_0".into()).into());
    }
    let mut dino_locals = Vec::new();
    for l in 0..clip_locals.len() {
        dino_locals.push(take(&format!("dino_local_{l}"))?);
    }
    let mask = if header.has_mask {
        let m = take("gt_mask")?;
        if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(FormatError::ShapeInconsistent("gt_mask holds values other than 0 and 1".into()).into());
        }
        let [h, w] = m.shape();
        Some(Mask { height: h, width: w, data: m.data().iter().map(|&v| v as u8).collect() })
    } else {
        None
    };
    if let Some(extra) = by_name.keys().next() {
        return Err(FormatError::BadHeader(format!("unexpected tensor `{extra}`")).into());
    }
    let b = FeatureBundle {
        clip_global,
        clip_locals,
        dino_global,
        dino_locals,
        grid: (header.grid[0], header.grid[1]),
        label: header.label,
        mask,
        category: header.category,
        source_id: header.source_id,
    };
    b.validate().map_err(|e| match e {
        Error::Data(msg) => Error::Format(FormatError::ShapeInconsistent(msg)),
        other => other,
    })?;
    Ok(b)
}

pub fn write_bundle(b: &FeatureBundle, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bundle(b)?).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: impl AsRef<Path>) -> Result<FeatureBundle> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bundle(&bytes)
}
