//! On-disk formats: feature bundles, checkpoints, heatmaps and synthetic
//! datasets.

mod bundle;
mod checkpoint;
mod heatmap;
mod synth;

pub use bundle::{encode_bundle, decode_bundle, read_bundle, write_bundle, BUNDLE_MAGIC, BUNDLE_VERSION};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint, CheckpointTensor, RngSnapshot,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use heatmap::{heatmap_bytes, write_heatmap};
pub use synth::{
    gen_synthetic, load_dataset, write_dataset, Manifest, ManifestCategory, SynthCategory, SynthDataset, SynthSpec,
};

/// Structural problems in a file, each with a stable code.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("version mismatch: file has {found}, reader supports {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: {0}")]
    Truncated(String),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("span mismatch: `{name}` declares {declared} bytes but spans {span}")]
    SpanMismatch { name: String, declared: usize, span: usize },
    #[error("offset overlap: `{name}` starts at {offset}, shared with another tensor")]
    OffsetOverlap { name: String, offset: usize },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("shape inconsistent: {0}")]
    ShapeInconsistent(String),
    #[error("dims mismatch: `{name}` is {found:?}, model expects {expected:?}")]
    DimsMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("value out of range: {0}")]
    OutOfRange(String),
}

impl FormatError {
    pub fn code(&self) -> &'static str {
        match self {
            FormatError::BadMagic { .. } => "bad_magic",
            FormatError::VersionMismatch { .. } => "version_mismatch",
            FormatError::Truncated(_) => "truncated_payload",
            FormatError::BadHeader(_) => "bad_header",
            FormatError::SpanMismatch { .. } => "span_mismatch",
            FormatError::OffsetOverlap { .. } => "offset_overlap",
            FormatError::MissingTensor(_) => "missing_tensor",
            FormatError::ShapeInconsistent(_) => "shape_inconsistent",
            FormatError::DimsMismatch { .. } => "dims_mismatch",
            FormatError::OutOfRange(_) => "out_of_range",
        }
    }
}

/// Tensor table entry shared by both binary containers.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub(crate) struct TableEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// Splits `magic ∥ version ∥ header_len ∥ header ∥ payload`.
pub(crate) fn split_container<'a>(
    bytes: &'a [u8],
    magic: &'static str,
    version: u32,
) -> Result<(&'a [u8], &'a [u8]), FormatError> {
    let m = magic.as_bytes();
    if bytes.len() < m.len() || &bytes[..m.len()] != m {
        return Err(FormatError::BadMagic { expected: magic, found: bytes[..bytes.len().min(m.len())].to_vec() });
    }
    let fixed = m.len() + 8;
    if bytes.len() < fixed {
        return Err(FormatError::Truncated(format!("{} bytes, preamble needs {fixed}", bytes.len())));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let found = word(m.len());
    if found != version {
        return Err(FormatError::VersionMismatch { found, expected: version });
    }
    let header_len = word(m.len() + 4) as usize;
    if bytes.len() < fixed + header_len {
        return Err(FormatError::Truncated(format!(
            "header declares {header_len} bytes, {} available",
            bytes.len() - fixed
        )));
    }
    Ok((&bytes[fixed..fixed + header_len], &bytes[fixed + header_len..]))
}

pub(crate) fn join_container(magic: &'static str, version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(magic.len() + 8 + header.len() + payload.len());
    out.extend_from_slice(magic.as_bytes());
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Checks the table against a payload of `payload_len` bytes with
/// `elem` bytes per value; returns entries sorted by offset.
pub(crate) fn check_table(
    table: &[TableEntry],
    payload_len: usize,
    elem: usize,
) -> Result<Vec<&TableEntry>, FormatError> {
    let mut sorted: Vec<&TableEntry> = table.iter().collect();
    sorted.sort_by_key(|e| e.offset);
    if let Some(w) = sorted.windows(2).find(|w| w[0].offset == w[1].offset) {
        return Err(FormatError::OffsetOverlap { name: w[1].name.clone(), offset: w[1].offset });
    }
    for (i, e) in sorted.iter().enumerate() {
        if e.shape.is_empty() || e.shape.contains(&0) {
            return Err(FormatError::BadHeader(format!("`{}` has empty shape {:?}", e.name, e.shape)));
        }
        let declared = e.shape.iter().product::<usize>() * elem;
        match sorted.get(i + 1) {
            Some(next) => {
                let span = next.offset - e.offset;
                if span != declared {
                    return Err(FormatError::SpanMismatch { name: e.name.clone(), declared, span });
                }
            }
            None => {
                if e.offset + declared > payload_len {
                    return Err(FormatError::Truncated(format!(
                        "`{}` needs bytes {}..{}, payload has {payload_len}",
                        e.name,
                        e.offset,
                        e.offset + declared
                    )));
                }
                let span = payload_len - e.offset;
                if span != declared {
                    return Err(FormatError::SpanMismatch { name: e.name.clone(), declared, span });
                }
            }
        }
    }
    if let Some(first) = sorted.first() {
        if first.offset != 0 {
            return Err(FormatError::SpanMismatch { name: "<payload start>".into(), declared: 0, span: first.offset });
        }
    } else if payload_len != 0 {
        return Err(FormatError::SpanMismatch { name: "<payload>".into(), declared: 0, span: payload_len });
    }
    Ok(sorted)
}
