//! Deterministic inference and dataset evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::config::{Scoring, TrainConfig};
use crate::data::{FeatureBundle, GridMap, Mask};
use crate::error::Result;
use crate::metrics::{self, ProSweep};
use crate::model::Model;
use crate::numcore::{Tape, Tensor, Var};
use crate::vtam::{upsample_map, AnomalyMap, ScorePair};

/// Outputs of one deterministic (`ε = 0`) forward pass.
#[derive(Clone, Debug)]
pub struct Inference {
    pub scores: ScorePair,
    pub maps: AnomalyMap,
    /// Fused patch features of the last layer, `N × D_c`.
    pub v_local_last: Tensor,
    pub t_final: Tensor,
}

fn grid_map(tape: &Tape<'_>, v: Var, grid: (usize, usize)) -> Result<GridMap> {
    GridMap::new(grid.0, grid.1, tape.value(v).data().to_vec())
}

pub fn infer(model: &Model, b: &FeatureBundle, scoring: Scoring) -> Result<Inference> {
    model.check_bundle(b)?;
    let mut tape = Tape::with_params(&model.store);
    let eps = Tensor::zeros(1, model.d_latent());
    let f = model.forward(&mut tape, b, &eps, scoring)?;
    let item = |v: Var| tape.value(v).item();
    let scores = ScorePair { s_global: item(f.scores.s_global), s_local: item(f.scores.s_local), s_final: item(f.scores.s_final) };
    let maps = AnomalyMap {
        per_layer: f.layer_maps.iter().map(|&v| grid_map(&tape, v, b.grid)).collect::<Result<_>>()?,
        fused: grid_map(&tape, f.p_map, b.grid)?,
        scale_weights: tape.value(f.scale_weights).data().to_vec(),
        spatial_masks: f.spatial_masks.iter().map(|&v| grid_map(&tape, v, b.grid)).collect::<Result<_>>()?,
    };
    let last = *f.v_locals.last().expect("at least one layer");
    Ok(Inference { scores, maps, v_local_last: tape.value(last).clone(), t_final: tape.value(f.t_final).clone() })
}

fn fixed6<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(x) if x.is_finite() => {
            let raw = RawValue::from_string(format!("{x:.6}")).map_err(serde::ser::Error::custom)?;
            raw.serialize(s)
        }
        _ => s.serialize_none(),
    }
}

/// Detection quality of image scores. `None` when a class is missing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    #[serde(serialize_with = "fixed6")]
    pub auroc: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub f1_max: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    #[serde(serialize_with = "fixed6")]
    pub auroc: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub pro: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    #[serde(serialize_with = "fixed6")]
    pub tir_fg: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub scd_normal: Option<f64>,
    #[serde(serialize_with = "fixed6")]
    pub scd_abnormal: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub images: usize,
    pub anomalous_images: usize,
    pub pixels: usize,
    pub anomalous_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub image: ImageMetrics,
    pub pixel: PixelMetrics,
    pub counts: Counts,
}

/// Settings that shaped a report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub tau: f64,
    pub gamma: f64,
    pub top_k: usize,
    pub fpr_limit: f64,
    /// `0` for the exhaustive sweep, otherwise the quantile count.
    pub pro_thresholds: usize,
    pub bundle_format_version: u32,
    pub checkpoint_format_version: u32,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image: ImageMetrics,
    pub pixel: PixelMetrics,
    pub diagnostics: Diagnostics,
    pub counts: Counts,
    pub per_category: BTreeMap<String, CategoryReport>,
    pub meta: ReportMeta,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub scoring: Scoring,
    pub fpr_limit: f64,
    pub sweep: ProSweep,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { scoring: Scoring::default(), fpr_limit: 0.3, sweep: ProSweep::Quantiles(metrics::PRO_QUANTILES) }
    }
}

/// Scores for one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub source_id: String,
    pub category: String,
    pub label: u8,
    pub scores: ScorePair,
    pub map: GridMap,
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub images: Vec<ImageResult>,
}

/// Map and mask at a common resolution for pixel metrics.
fn pixel_pair(b: &FeatureBundle, fused: &GridMap) -> (Vec<f64>, Mask) {
    let mask = b.mask.clone().unwrap_or_else(|| Mask::empty(b.grid.0, b.grid.1));
    let map = upsample_map(fused, mask.height, mask.width);
    (map.data, mask)
}

struct Pooled {
    scores: Vec<f64>,
    labels: Vec<u8>,
    maps: Vec<Vec<f64>>,
    masks: Vec<Mask>,
}

impl Pooled {
    fn new() -> Self {
        Self { scores: Vec::new(), labels: Vec::new(), maps: Vec::new(), masks: Vec::new() }
    }

    fn metrics(&self, opts: &EvalOptions) -> CategoryReport {
        let image = ImageMetrics {
            auroc: metrics::auroc(&self.scores, &self.labels).ok(),
            f1_max: metrics::f1_max(&self.scores, &self.labels).ok(),
            ap: metrics::average_precision(&self.scores, &self.labels).ok(),
        };
        let px: Vec<f64> = self.maps.iter().flatten().copied().collect();
        let py: Vec<u8> = self.masks.iter().flat_map(|m| m.data.iter().copied()).collect();
        let maps: Vec<&[f64]> = self.maps.iter().map(|m| &m[..]).collect();
        let pixel = PixelMetrics {
            auroc: metrics::auroc(&px, &py).ok(),
            pro: metrics::pro(&maps, &self.masks, opts.fpr_limit, opts.sweep).ok(),
            ap: metrics::average_precision(&px, &py).ok(),
        };
        let counts = Counts {
            images: self.scores.len(),
            anomalous_images: self.labels.iter().filter(|&&l| l != 0).count(),
            pixels: py.len(),
            anomalous_pixels: py.iter().filter(|&&v| v != 0).count(),
        };
        CategoryReport { image, pixel, counts }
    }
}

pub fn evaluate(model: &Model, data: &[FeatureBundle], opts: &EvalOptions) -> Result<EvalOutcome> {
    let n_normal = model.config.arch.n_normal;
    let mut all = Pooled::new();
    let mut by_cat: BTreeMap<String, Pooled> = BTreeMap::new();
    let mut statics: BTreeMap<String, Tensor> = BTreeMap::new();
    let (mut tir_sum, mut tir_count) = (0.0, 0usize);
    let (mut scd_n, mut scd_a) = (0.0, 0.0);
    let mut images = Vec::with_capacity(data.len());

    for b in data {
        let inf = infer(model, b, opts.scoring)?;
        let (map, mask) = pixel_pair(b, &inf.maps.fused);
        for pool in [&mut all, by_cat.entry(b.category.clone()).or_insert_with(Pooled::new)] {
            pool.scores.push(inf.scores.s_final);
            pool.labels.push(b.label);
            pool.maps.push(map.clone());
            pool.masks.push(mask.clone());
        }

        if let Some(gm) = b.grid_mask() {
            let t_abn: Vec<f64> = (0..inf.t_final.cols())
                .map(|c| (n_normal..inf.t_final.rows()).map(|r| inf.t_final.get(r, c)).sum::<f64>())
                .map(|s| s / (inf.t_final.rows() - n_normal) as f64)
                .collect();
            let (s, c) = metrics::tir_fg_terms(&inf.v_local_last, &gm, &t_abn)?;
            tir_sum += s;
            tir_count += c;
        }
        if !statics.contains_key(&b.category) {
            statics.insert(b.category.clone(), model.static_embeddings(&b.category)?);
        }
        let (n, a) = metrics::scd_by_bank(&inf.t_final, &statics[&b.category], n_normal)?;
        scd_n += n;
        scd_a += a;

        images.push(ImageResult {
            source_id: b.source_id.clone(),
            category: b.category.clone(),
            label: b.label,
            scores: inf.scores,
            map: inf.maps.fused,
        });
    }

    let overall = all.metrics(opts);
    let k = data.len() as f64;
    let diagnostics = Diagnostics {
        tir_fg: (tir_count > 0).then(|| tir_sum / tir_count as f64),
        scd_normal: (!data.is_empty()).then(|| scd_n / k),
        scd_abnormal: (!data.is_empty()).then(|| scd_a / k),
    };
    let (sweep_count, fpr_limit) = match opts.sweep {
        ProSweep::Exhaustive => (0, opts.fpr_limit),
        ProSweep::Quantiles(q) => (q, opts.fpr_limit),
    };
    let report = EvalReport {
        image: overall.image,
        pixel: overall.pixel,
        diagnostics,
        counts: overall.counts,
        per_category: by_cat.into_iter().map(|(c, p)| (c, p.metrics(opts))).collect(),
        meta: ReportMeta {
            tau: opts.scoring.tau,
            gamma: opts.scoring.gamma,
            top_k: opts.scoring.top_k,
            fpr_limit,
            pro_thresholds: sweep_count,
            bundle_format_version: crate::io::BUNDLE_VERSION,
            checkpoint_format_version: crate::io::CHECKPOINT_VERSION,
            train_config: None,
        },
    };
    Ok(EvalOutcome { report, images })
}
