//! Image- and pixel-level detection metrics and prompt alignment diagnostics.
//!
//! Ranking metrics group tied scores: a tie block is crossed as one
//! threshold step, so results never depend on input order.

use std::cmp::Ordering;

use crate::data::Mask;
use crate::numcore::{Tensor, COSINE_FLOOR};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("{metric}: {scores} scores for {labels} labels")]
    LengthMismatch { metric: &'static str, scores: usize, labels: usize },
    #[error("{metric}: needs both positive and negative samples")]
    SingleClass { metric: &'static str },
    #[error("{metric}: no positive samples")]
    NoPositives { metric: &'static str },
    #[error("{metric}: non-finite score")]
    NonFinite { metric: &'static str },
    #[error("pro: no anomalous region in any mask")]
    NoRegions,
    #[error("pro: no normal pixel in any mask")]
    NoNegatives,
    #[error("pro: false-positive limit {0} outside (0, 1]")]
    BadLimit(f64),
    #[error("tir_fg: empty foreground")]
    EmptyForeground,
    #[error("{metric}: {detail}")]
    Shape { metric: &'static str, detail: String },
}

fn check_inputs(metric: &'static str, scores: &[f64], labels: &[u8]) -> Result<(usize, usize), MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { metric, scores: scores.len(), labels: labels.len() });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite { metric });
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by descending score, stable.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    idx
}

/// Cumulative `(tp, fp)` after each tie block, walking scores downward.
fn threshold_steps(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let order = descending(scores);
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    steps
}

/// Probability that a random positive outranks a random negative; ties count ½.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = check_inputs("auroc", scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass { metric: "auroc" });
    }
    // Mann–Whitney U from tie-averaged ranks (ascending, 1-based).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg_rank * order[i..j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Best F1 over thresholds at the distinct scores, predicting `score ≥ t`.
pub fn f1_max(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, neg) = check_inputs("f1_max", scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass { metric: "f1_max" });
    }
    let best = threshold_steps(scores, labels)
        .into_iter()
        .map(|(tp, fp)| 2.0 * tp as f64 / (tp + fp + pos) as f64)
        .fold(0.0, f64::max);
    Ok(best)
}

/// `Σ (R_t − R_{t−1}) · P_t` over descending thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    let (pos, _) = check_inputs("average_precision", scores, labels)?;
    if pos == 0 {
        return Err(MetricError::NoPositives { metric: "average_precision" });
    }
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for (tp, fp) in threshold_steps(scores, labels) {
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos as f64 * (tp as f64 / (tp + fp) as f64);
            prev_tp = tp;
        }
    }
    Ok(ap)
}

/// Labels 4-connected foreground components; returns per-pixel component
/// index (`None` on background) and component sizes.
pub fn connected_components(mask: &Mask) -> (Vec<Option<usize>>, Vec<usize>) {
    let (h, w) = (mask.height, mask.width);
    let mut comp = vec![None; h * w];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || comp[start].is_some() {
            continue;
        }
        let id = sizes.len();
        let mut size = 0;
        comp[start] = Some(id);
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if mask.data[q] != 0 && comp[q].is_none() {
                    comp[q] = Some(id);
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
        }
        sizes.push(size);
    }
    (comp, sizes)
}

/// Default number of quantile thresholds for the region-overlap curve.
pub const PRO_QUANTILES: usize = 200;

/// Threshold set for the region-overlap curve.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProSweep {
    /// Every distinct pooled score.
    Exhaustive,
    /// This many evenly spaced quantiles of the pooled scores.
    Quantiles(usize),
}

/// Points `(fpr, mean region overlap)` of the region-overlap curve, starting
/// at `(0, 0)` and ordered by increasing fpr.
pub fn pro_curve(maps: &[&[f64]], masks: &[Mask], sweep: ProSweep) -> Result<Vec<(f64, f64)>, MetricError> {
    if maps.len() != masks.len() {
        return Err(MetricError::LengthMismatch { metric: "pro", scores: maps.len(), labels: masks.len() });
    }
    // pooled (score, region or background)
    let mut pixels: Vec<(f64, Option<usize>)> = Vec::new();
    let mut region_sizes = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.len() != mask.data.len() {
            return Err(MetricError::Shape {
                metric: "pro",
                detail: format!("map of {} values for a {}x{} mask", map.len(), mask.height, mask.width),
            });
        }
        let (comp, sizes) = connected_components(mask);
        let base = region_sizes.len();
        region_sizes.extend(sizes);
        for (&s, c) in map.iter().zip(comp) {
            if !s.is_finite() {
                return Err(MetricError::NonFinite { metric: "pro" });
            }
            pixels.push((s, c.map(|c| base + c)));
        }
    }
    if region_sizes.is_empty() {
        return Err(MetricError::NoRegions);
    }
    let negatives = pixels.iter().filter(|p| p.1.is_none()).count();
    if negatives == 0 {
        return Err(MetricError::NoNegatives);
    }
    pixels.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let keep: Option<Vec<f64>> = match sweep {
        ProSweep::Exhaustive => None,
        ProSweep::Quantiles(q) => {
            let q = q.max(1);
            let n = pixels.len();
            // descending order: quantile level k/q sits at index (1 − k/q)·(n − 1)
            let mut t: Vec<f64> = (0..=q)
                .map(|k| pixels[((n - 1) as f64 * (1.0 - k as f64 / q as f64)).round() as usize].0)
                .collect();
            t.dedup();
            Some(t)
        }
    };

    let n_regions = region_sizes.len() as f64;
    let mut curve = vec![(0.0, 0.0)];
    let mut fp = 0usize;
    let mut overlap_sum = 0.0;
    let mut i = 0;
    while i < pixels.len() {
        let s = pixels[i].0;
        while i < pixels.len() && pixels[i].0 == s {
            match pixels[i].1 {
                Some(r) => overlap_sum += 1.0 / region_sizes[r] as f64,
                None => fp += 1,
            }
            i += 1;
        }
        let wanted = keep.as_ref().is_none_or(|k| k.contains(&s));
        if wanted {
            curve.push((fp as f64 / negatives as f64, overlap_sum / n_regions));
        }
    }
    Ok(curve)
}

/// Area under the region-overlap curve on `[0, fpr_limit]`, normalized by
/// the limit. Trapezoids between points inside the range; the last point
/// inside the range is held flat up to the limit.
pub fn pro_area(curve: &[(f64, f64)], fpr_limit: f64) -> Result<f64, MetricError> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricError::BadLimit(fpr_limit));
    }
    let inside: Vec<(f64, f64)> = curve.iter().copied().filter(|&(f, _)| f <= fpr_limit).collect();
    let mut area = 0.0;
    for w in inside.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    if let Some(&(f, p)) = inside.last() {
        area += (fpr_limit - f) * p;
    }
    Ok(area / fpr_limit)
}

/// Normalized region-overlap area up to `fpr_limit`.
pub fn pro(maps: &[&[f64]], masks: &[Mask], fpr_limit: f64, sweep: ProSweep) -> Result<f64, MetricError> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(MetricError::BadLimit(fpr_limit));
    }
    pro_area(&pro_curve(maps, masks, sweep)?, fpr_limit)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_FLOOR);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_FLOOR);
    dot / (na * nb)
}

/// Sum and count of `cos(v_u, t_abn)` over one image's foreground patches.
pub fn tir_fg_terms(v_local: &Tensor, mask: &Mask, t_abn: &[f64]) -> Result<(f64, usize), MetricError> {
    if v_local.rows() != mask.data.len() || v_local.cols() != t_abn.len() {
        return Err(MetricError::Shape {
            metric: "tir_fg",
            detail: format!("features {:?}, mask of {}, text width {}", v_local.shape(), mask.data.len(), t_abn.len()),
        });
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (u, &m) in mask.data.iter().enumerate() {
        if m != 0 {
            sum += cosine(v_local.row(u), t_abn);
            count += 1;
        }
    }
    Ok((sum, count))
}

/// Mean cosine between foreground patch features and the abnormal text
/// embedding, pooled over images.
pub fn tir_fg(v_locals: &[Tensor], masks: &[Mask], t_abn: &[f64]) -> Result<f64, MetricError> {
    if v_locals.len() != masks.len() {
        return Err(MetricError::LengthMismatch { metric: "tir_fg", scores: v_locals.len(), labels: masks.len() });
    }
    let (mut sum, mut count) = (0.0, 0);
    for (v, m) in v_locals.iter().zip(masks) {
        let (s, c) = tir_fg_terms(v, m, t_abn)?;
        sum += s;
        count += c;
    }
    if count == 0 {
        return Err(MetricError::EmptyForeground);
    }
    Ok(sum / count as f64)
}

/// Per-row Euclidean distance between learned and initial text embeddings.
pub fn scd(t_final: &Tensor, t_static: &Tensor) -> Result<Vec<f64>, MetricError> {
    if t_final.shape() != t_static.shape() {
        return Err(MetricError::Shape {
            metric: "scd",
            detail: format!("{:?} vs {:?}", t_final.shape(), t_static.shape()),
        });
    }
    Ok((0..t_final.rows())
        .map(|r| t_final.row(r).iter().zip(t_static.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// Mean [`scd`] over the normal rows and over the abnormal rows.
pub fn scd_by_bank(t_final: &Tensor, t_static: &Tensor, n_normal: usize) -> Result<(f64, f64), MetricError> {
    let d = scd(t_final, t_static)?;
    if n_normal == 0 || n_normal >= d.len() {
        return Err(MetricError::Shape { metric: "scd", detail: format!("{n_normal} normal rows of {}", d.len()) });
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok((mean(&d[..n_normal]), mean(&d[n_normal..])))
}
