//! Training losses and the per-batch objective.

use serde::{Deserialize, Serialize};

use crate::config::{FocalTarget, TrainConfig};
use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, Model};
use crate::numcore::{Axis, NumError, Tape, Tensor, Var, COSINE_FLOOR};
use crate::vcpg::{margin_from_cosines, vae_loss};

/// Probabilities are clamped to `[FOCAL_CLAMP, 1 − FOCAL_CLAMP]` before logs.
pub const FOCAL_CLAMP: f64 = 1e-7;

/// `−mean[Y(1−p)^λ log p + (1−Y) p^λ log(1−p)]` over pixels.
pub fn focal_loss(tape: &mut Tape<'_>, p: Var, target: &Tensor, lambda: f64) -> std::result::Result<Var, NumError> {
    if tape.shape(p) != target.shape() {
        return Err(NumError::Shape {
            op: "focal_loss",
            detail: format!("map {:?}, target {:?}", tape.shape(p), target.shape()),
        });
    }
    let p = tape.clamp(p, FOCAL_CLAMP, 1.0 - FOCAL_CLAMP)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.offset(q, 1.0)?;
    let log_p = tape.log(p)?;
    let log_q = tape.log(q)?;
    let pos = tape.powf(q, lambda)?;
    let pos = tape.mul(pos, log_p)?;
    let neg = tape.powf(p, lambda)?;
    let neg = tape.mul(neg, log_q)?;
    let y = tape.constant(target.clone());
    let not_y = tape.constant(target.map(|v| 1.0 - v));
    let pos = tape.mul(y, pos)?;
    let neg = tape.mul(not_y, neg)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both, Axis::All)?;
    tape.scale(m, -1.0)
}

/// `BCE(σ(s), y) = softplus(s) − y·s`.
pub fn class_loss(tape: &mut Tape<'_>, s: Var, y: f64) -> std::result::Result<Var, NumError> {
    let sp = tape.softplus(s)?;
    let ys = tape.scale(s, y)?;
    tape.sub(sp, ys)
}

/// Scalar loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg: f64,
    pub cls: f64,
    pub vae: f64,
    pub reg: f64,
    pub total: f64,
}

/// `seg + cls + λ₁·vae + λ₂·reg`.
pub fn total_loss(seg: f64, cls: f64, vae: f64, reg: f64, lambda1: f64, lambda2: f64) -> f64 {
    seg + cls + vae * lambda1 + reg * lambda2
}

/// Same sum on the tape, in the same association order as [`total_loss`].
pub fn total_loss_var(
    tape: &mut Tape<'_>,
    parts: [Var; 4],
    lambda1: f64,
    lambda2: f64,
) -> std::result::Result<Var, NumError> {
    let [seg, cls, vae, reg] = parts;
    let a = tape.add(seg, cls)?;
    let v = tape.scale(vae, lambda1)?;
    let a = tape.add(a, v)?;
    let r = tape.scale(reg, lambda2)?;
    tape.add(a, r)
}

/// Ground-truth map on the patch grid as an `N × 1` column.
pub fn grid_target(b: &FeatureBundle) -> Result<Tensor> {
    let n = b.n_tokens();
    match b.grid_mask() {
        Some(m) => Ok(Tensor::new(n, 1, m.to_f64())?),
        None if b.is_anomalous() => Err(Error::Data(format!("{}: anomalous sample without a mask", b.source_id))),
        None => Ok(Tensor::zeros(n, 1)),
    }
}

/// Loss terms of one sample on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SampleLossVars {
    pub seg: Var,
    pub cls: Var,
    pub vae: Var,
    pub reg: Var,
    /// Per-row cosine between `T_final` and the anchor, `M × 1`.
    pub cosines: Var,
}

/// Batch objective: every part is the mean over samples; `total` is built
/// from those means.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub total: Var,
    pub parts: [Var; 4],
    /// Per-sample `T_init` values used as stop-gradient anchors.
    pub anchors: Vec<Tensor>,
    pub cosines: Vec<Var>,
}

/// Builds the batch objective on `tape`. `eps` holds one noise row per sample.
pub fn batch_loss(
    tape: &mut Tape<'_>,
    model: &Model,
    batch: &[&FeatureBundle],
    eps: &[Tensor],
    cfg: &TrainConfig,
) -> Result<BatchLoss> {
    batch_loss_anchored(tape, model, batch, eps, cfg, None)
}

/// [`batch_loss`] with the stop-gradient anchors optionally pinned to given
/// values, so finite differences see the same surrogate the gradient uses.
pub fn batch_loss_anchored(
    tape: &mut Tape<'_>,
    model: &Model,
    batch: &[&FeatureBundle],
    eps: &[Tensor],
    cfg: &TrainConfig,
    anchors: Option<&[Tensor]>,
) -> Result<BatchLoss> {
    if batch.is_empty() || eps.len() != batch.len() || anchors.is_some_and(|a| a.len() != batch.len()) {
        return Err(Error::Data(format!("batch of {} samples with {} noise draws", batch.len(), eps.len())));
    }
    let mut used = Vec::with_capacity(batch.len());
    let scoring = cfg.scoring();
    let mut sums: Option<[Var; 4]> = None;
    let mut cosines = Vec::with_capacity(batch.len());
    for (i, (b, e)) in batch.iter().zip(eps).enumerate() {
        let target = grid_target(b)?;
        let fwd = model.forward(tape, b, e, scoring)?;
        let anchor = match anchors {
            Some(a) => a[i].clone(),
            None => tape.value(fwd.t_init).clone(),
        };
        let parts = sample_losses(tape, model, &fwd, &target, f64::from(b.label), &anchor, cfg)?;
        used.push(anchor);
        cosines.push(parts.cosines);
        let parts = [parts.seg, parts.cls, parts.vae, parts.reg];
        sums = Some(match sums {
            None => parts,
            Some(acc) => {
                let mut out = acc;
                for (o, p) in out.iter_mut().zip(parts) {
                    *o = tape.add(*o, p)?;
                }
                out
            }
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let mut parts = sums.expect("nonempty batch");
    for p in &mut parts {
        *p = tape.scale(*p, inv)?;
    }
    let total = total_loss_var(tape, parts, cfg.lambda1, cfg.lambda2)?;
    Ok(BatchLoss { total, parts, anchors: used, cosines })
}

/// Per-sample losses for `model`'s forward outputs; `anchor` is the
/// stop-gradient value of `T_init`.
pub fn sample_losses(
    tape: &mut Tape<'_>,
    model: &Model,
    fwd: &ForwardVars,
    target: &Tensor,
    label: f64,
    anchor: &Tensor,
    cfg: &TrainConfig,
) -> std::result::Result<SampleLossVars, NumError> {
    let mut seg = focal_loss(tape, fwd.p_map, target, cfg.focal_gamma)?;
    if cfg.focal_target == FocalTarget::FusedAndLayers {
        let mut layers = Vec::with_capacity(fwd.layer_maps.len());
        for &m in &fwd.layer_maps {
            layers.push(focal_loss(tape, m, target, cfg.focal_gamma)?);
        }
        let stacked = tape.concat_cols(&layers)?;
        let mean = tape.mean(stacked, Axis::All)?;
        seg = tape.add(seg, mean)?;
    }
    let cls = class_loss(tape, fwd.scores.s_final, label)?;
    let vae = vae_loss(tape, fwd.v_global, &fwd.latent, &model.vae, cfg.beta)?.total;
    let anchor = tape.constant(anchor.clone());
    let cosines = tape.cosine_rows(fwd.t_final, anchor, COSINE_FLOOR)?;
    let reg = margin_from_cosines(tape, cosines, cfg.xi)?;
    Ok(SampleLossVars { seg, cls, vae, reg, cosines })
}

impl BatchLoss {
    pub fn breakdown(&self, tape: &Tape<'_>) -> LossBreakdown {
        let v = |x: Var| tape.value(x).item();
        LossBreakdown {
            seg: v(self.parts[0]),
            cls: v(self.parts[1]),
            vae: v(self.parts[2]),
            reg: v(self.parts[3]),
            total: v(self.total),
        }
    }

    /// Smallest prompt-row cosine seen by the margin loss in this batch.
    pub fn min_cosine(&self, tape: &Tape<'_>) -> f64 {
        self.cosines.iter().flat_map(|&c| tape.value(c).data().to_vec()).fold(f64::INFINITY, f64::min)
    }
}
