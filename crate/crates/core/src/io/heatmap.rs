use std::path::Path;

use super::FormatError;
use crate::data::GridMap;
use crate::error::{Error, Result};

/// Binary PGM (`P5`) with one byte per cell, `floor(255·p + 0.5)`.
pub fn heatmap_bytes(map: &GridMap) -> Result<Vec<u8>, FormatError> {
    let mut out = format!("P5\n{} {}\n255\n", map.width, map.height).into_bytes();
    for (i, &p) in map.data.iter().enumerate() {
        if !(0.0..=1.0).contains(&p) {
            return Err(FormatError::OutOfRange(format!("cell {i} holds {p}")));
        }
        out.push((255.0 * p + 0.5).floor() as u8);
    }
    Ok(out)
}

pub fn write_heatmap(map: &GridMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, heatmap_bytes(map)?).map_err(|e| Error::io(path, e))
}
