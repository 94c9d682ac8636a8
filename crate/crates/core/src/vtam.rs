//! Visual-text anomaly mapping with a dense dual-gated mixture of experts.
//!
//! Every layer is an expert producing a per-patch anomaly probability from
//! the cosine similarity of its fused patches to the prompt banks. A global
//! gate (from the fused class token) weights layers, a per-layer spatial
//! gate weights patches, and the weighted sum is the fused map. The image
//! score mixes a global prompt match with the strongest local evidence.

use rand_chacha::ChaCha8Rng;

use crate::data::GridMap;
use crate::layers::{Mlp, MlpSpec};
use crate::numcore::{Axis, NumError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var, COSINE_FLOOR};

/// Which prompt rows belong to which bank: the first `n_normal` rows are
/// normal, the next `n_abnormal` abnormal.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptLabels {
    pub n_normal: usize,
    pub n_abnormal: usize,
}

impl PromptLabels {
    pub fn total(&self) -> usize {
        self.n_normal + self.n_abnormal
    }

    /// `P × 2` averaging matrix: column 0 averages normal rows, column 1 abnormal.
    fn bank_means(&self) -> Tensor {
        let p = self.total();
        let mut t = Tensor::zeros(p, 2);
        for i in 0..self.n_normal {
            t.set(i, 0, 1.0 / self.n_normal as f64);
        }
        for i in self.n_normal..p {
            t.set(i, 1, 1.0 / self.n_abnormal as f64);
        }
        t
    }
}

#[derive(Clone, Debug)]
pub struct GateParams {
    /// `D_c → hidden → L` scale gate; output layer zero-initialized.
    pub global: Mlp,
    /// Per-layer `1×1` projection `D_c → 1` as (`D_c×1` weight, `1×1` bias).
    pub local: Vec<(ParamId, ParamId)>,
}

impl GateParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_clip: usize,
        n_layers: usize,
        hidden: usize,
    ) -> Result<Self, NumError> {
        let global = Mlp::register(
            store,
            rng,
            MlpSpec { prefix: "vtam.gate.global", d_in: d_clip, d_hidden: hidden, d_out: n_layers, zero_output: true, trainable: true },
        )?;
        let local = (0..n_layers)
            .map(|l| {
                let w = store.add(format!("vtam.gate.local{l}.w"), Tensor::zeros(d_clip, 1), ParamGroup::Other, true)?;
                let b = store.add(format!("vtam.gate.local{l}.b"), Tensor::zeros(1, 1), ParamGroup::Other, true)?;
                Ok((w, b))
            })
            .collect::<Result<Vec<_>, NumError>>()?;
        Ok(Self { global, local })
    }
}

/// Cosine similarity of every patch to every prompt row: `N × P`.
pub fn raw_anomaly_map(tape: &mut Tape<'_>, v_local: Var, t_final: Var) -> Result<Var, NumError> {
    tape.cosine_matrix(v_local, t_final, COSINE_FLOOR)
}

/// Two-way softmax between bank-averaged similarities; returns `N × 1`
/// anomaly probabilities.
pub fn probability_map(tape: &mut Tape<'_>, sim: Var, labels: PromptLabels, tau: f64) -> Result<Var, NumError> {
    if labels.n_normal == 0 || labels.n_abnormal == 0 {
        return Err(NumError::Invalid("both prompt banks must be nonempty".into()));
    }
    if tape.shape(sim)[1] != labels.total() {
        return Err(NumError::Shape {
            op: "probability_map",
            detail: format!("{} similarity columns for {} prompts", tape.shape(sim)[1], labels.total()),
        });
    }
    let means = tape.constant(labels.bank_means());
    let banks = tape.matmul(sim, means)?;
    let banks = tape.scale(banks, 1.0 / tau)?;
    let probs = tape.softmax(banks, Axis::Cols)?;
    tape.slice_cols(probs, 1, 1)
}

/// Layer weights `1 × L` from the fused class token.
pub fn scale_gate(tape: &mut Tape<'_>, v_global: Var, p: &GateParams) -> Result<Var, NumError> {
    let logits = p.global.forward(tape, v_global)?;
    tape.softmax(logits, Axis::Cols)
}

/// Per-patch gate `N × 1` in `(0, 1)` for layer `layer`.
pub fn spatial_gate(tape: &mut Tape<'_>, v_local: Var, p: &GateParams, layer: usize) -> Result<Var, NumError> {
    let &(w, b) = p
        .local
        .get(layer)
        .ok_or_else(|| NumError::Invalid(format!("no spatial gate for layer {layer}")))?;
    let (w, b) = (tape.param(w), tape.param(b));
    let logits = tape.linear(v_local, w, b)?;
    tape.sigmoid(logits)
}

/// `Σ_l w[l] · (M_l ⊙ P_l)`.
pub fn moe_aggregate(tape: &mut Tape<'_>, maps: &[Var], masks: &[Var], w_scale: Var) -> Result<Var, NumError> {
    let l = maps.len();
    if l == 0 || masks.len() != l || tape.shape(w_scale) != [1, l] {
        return Err(NumError::Shape {
            op: "moe_aggregate",
            detail: format!("{} maps, {} masks, weights {:?}", l, masks.len(), tape.shape(w_scale)),
        });
    }
    let mut acc: Option<Var> = None;
    for (i, (&p, &m)) in maps.iter().zip(masks).enumerate() {
        let gated = tape.mul(m, p)?;
        let wi = tape.slice_cols(w_scale, i, 1)?;
        let term = tape.scale_by(gated, wi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc.expect("at least one layer"))
}

/// Mean of the `k` largest map values.
pub fn local_evidence(tape: &mut Tape<'_>, p_map: Var, k: usize) -> Result<Var, NumError> {
    tape.top_k_mean(p_map, k)
}

/// Scalar scores on the tape.
#[derive(Clone, Copy, Debug)]
pub struct ScoreVars {
    pub s_global: Var,
    pub s_local: Var,
    pub s_final: Var,
}

/// `(1 − γ)·S_global + γ·S_local`, where `S_global` is the anomaly
/// probability of the fused class token against the two banks.
pub fn final_score(
    tape: &mut Tape<'_>,
    v_global: Var,
    t_final: Var,
    s_local: Var,
    gamma: f64,
    labels: PromptLabels,
    tau: f64,
) -> Result<ScoreVars, NumError> {
    let sim = raw_anomaly_map(tape, v_global, t_final)?;
    let s_global = probability_map(tape, sim, labels, tau)?;
    let a = tape.scale(s_global, 1.0 - gamma)?;
    let b = tape.scale(s_local, gamma)?;
    let s_final = tape.add(a, b)?;
    Ok(ScoreVars { s_global, s_local, s_final })
}

/// Plain-value mixture outputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub per_layer: Vec<GridMap>,
    pub fused: GridMap,
    pub scale_weights: Vec<f64>,
    pub spatial_masks: Vec<GridMap>,
}

/// Plain-value image scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScorePair {
    pub s_global: f64,
    pub s_local: f64,
    pub s_final: f64,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_map(map: &GridMap, height: usize, width: usize) -> GridMap {
    if (height, width) == (map.height, map.width) {
        return map.clone();
    }
    let sy = map.height as f64 / height as f64;
    let sx = map.width as f64 / width as f64;
    let mut out = vec![0.0; height * width];
    for r in 0..height {
        let fy = ((r as f64 + 0.5) * sy - 0.5).clamp(0.0, (map.height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(map.height - 1);
        let wy = fy - y0 as f64;
        for c in 0..width {
            let fx = ((c as f64 + 0.5) * sx - 0.5).clamp(0.0, (map.width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(map.width - 1);
            let wx = fx - x0 as f64;
            let top = map.get(y0, x0) * (1.0 - wx) + map.get(y0, x1) * wx;
            let bottom = map.get(y1, x0) * (1.0 - wx) + map.get(y1, x1) * wx;
            out[r * width + c] = top * (1.0 - wy) + bottom * wy;
        }
    }
    GridMap { height, width, data: out }
}
