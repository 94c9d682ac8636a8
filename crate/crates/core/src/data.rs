//! In-memory feature bundles, masks and score maps.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Binary ground-truth mask, row-major, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0; height * width] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c] != 0
    }

    /// Nearest-neighbour resample, sampling at target cell centres.
    pub fn resample(&self, height: usize, width: usize) -> Mask {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Mask::empty(height, width);
        for r in 0..height {
            let sr = (((r as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for c in 0..width {
                let sc = (((c as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                out.data[r * width + c] = self.data[sr * self.width + sc];
            }
        }
        out
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

/// A real-valued map on a `height × width` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl GridMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height * width != data.len() || data.is_empty() {
            return Err(Error::Data(format!("{height}x{width} map with {} values", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, data: vec![v; height * width] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Frozen multi-scale features for one image from both encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `1 × D_c` class token of the semantic encoder.
    pub clip_global: Tensor,
    /// One `N × D_c` patch matrix per selected layer.
    pub clip_locals: Vec<Tensor>,
    /// `1 × D_d` class token of the structural encoder.
    pub dino_global: Tensor,
    pub dino_locals: Vec<Tensor>,
    /// Patch grid `(H′, W′)`; `N = H′·W′`.
    pub grid: (usize, usize),
    pub label: u8,
    /// Ground truth at grid or full resolution.
    pub mask: Option<Mask>,
    pub category: String,
    pub source_id: String,
}

impl FeatureBundle {
    pub fn n_layers(&self) -> usize {
        self.clip_locals.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn d_clip(&self) -> usize {
        self.clip_global.cols()
    }

    pub fn d_dino(&self) -> usize {
        self.dino_global.cols()
    }

    pub fn is_anomalous(&self) -> bool {
        self.label != 0
    }

    /// Checks the structural invariants: shared grid, shared widths, layer
    /// counts and mask geometry.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.grid;
        let n = h * w;
        if n == 0 {
            return Err(Error::Data(format!("{}: empty grid", self.source_id)));
        }
        if self.clip_locals.is_empty() || self.clip_locals.len() != self.dino_locals.len() {
            return Err(Error::Data(format!(
                "{}: layer counts differ or are zero ({} clip, {} dino)",
                self.source_id,
                self.clip_locals.len(),
                self.dino_locals.len()
            )));
        }
        if self.clip_global.rows() != 1 || self.dino_global.rows() != 1 {
            return Err(Error::Data(format!("{}: global tokens must be single rows", self.source_id)));
        }
        let (dc, dd) = (self.d_clip(), self.d_dino());
        for (l, (c, d)) in self.clip_locals.iter().zip(&self.dino_locals).enumerate() {
            if c.shape() != [n, dc] || d.shape() != [n, dd] {
                return Err(Error::Data(format!(
                    "{}: layer {l} shapes {:?}/{:?} do not match grid {h}x{w} and widths {dc}/{dd}",
                    self.source_id,
                    c.shape(),
                    d.shape()
                )));
            }
        }
        if self.label > 1 {
            return Err(Error::Data(format!("{}: label {} is not binary", self.source_id, self.label)));
        }
        if let Some(m) = &self.mask {
            if m.data.len() != m.height * m.width || m.data.iter().any(|&v| v > 1) {
                return Err(Error::Data(format!("{}: malformed mask", self.source_id)));
            }
            if m.height < h || m.width < w {
                return Err(Error::Data(format!(
                    "{}: mask {}x{} is coarser than grid {h}x{w}",
                    self.source_id, m.height, m.width
                )));
            }
        }
        Ok(())
    }

    /// Mask sampled onto the patch grid, if present.
    pub fn grid_mask(&self) -> Option<Mask> {
        self.mask.as_ref().map(|m| m.resample(self.grid.0, self.grid.1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resample_identity_and_downscale() {
        let m = Mask { height: 2, width: 2, data: vec![1, 0, 0, 1] };
        assert_eq!(m.resample(2, 2), m);
        let up = m.resample(4, 4);
        assert_eq!(up.count(), 8);
        assert_eq!(up.resample(2, 2), m);
    }
}
