//! Hierarchical semantic-visual fusion.
//!
//! Each layer pair (and the class-token pair) runs through one adaptive
//! token fusion block: two cross-attention paths (semantic queries over
//! structural keys and the reverse), layer-normed, concatenated, passed
//! through a GELU MLP and added back onto the semantic features.

use rand_chacha::ChaCha8Rng;

use crate::data::FeatureBundle;
use crate::layers::{variance_scaled, Mlp, MlpSpec};
use crate::numcore::{Axis, NumError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var, LN_EPS};

/// Parameters of one fusion block.
#[derive(Clone, Debug)]
pub struct AtfParams {
    pub wq_c: ParamId,
    pub wk_c: ParamId,
    pub wv_c: ParamId,
    pub wq_d: ParamId,
    pub wk_d: ParamId,
    pub wv_d: ParamId,
    pub ln_cd_gain: ParamId,
    pub ln_cd_bias: ParamId,
    pub ln_dc_gain: ParamId,
    pub ln_dc_bias: ParamId,
    /// `2·d_head → d_hidden → D_c`; output layer zero-initialized.
    pub mlp: Mlp,
    pub d_head: usize,
    pub d_clip: usize,
    pub d_dino: usize,
}

impl AtfParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_clip: usize,
        d_dino: usize,
        d_head: usize,
        d_hidden: usize,
    ) -> Result<Self, NumError> {
        let mut proj = |store: &mut ParamStore, name: &str, fan_in: usize| {
            store.add(format!("{prefix}.{name}"), variance_scaled(rng, fan_in, d_head), ParamGroup::Other, true)
        };
        let wq_c = proj(store, "wq_c", d_clip)?;
        let wk_c = proj(store, "wk_c", d_clip)?;
        let wv_c = proj(store, "wv_c", d_clip)?;
        let wq_d = proj(store, "wq_d", d_dino)?;
        let wk_d = proj(store, "wk_d", d_dino)?;
        let wv_d = proj(store, "wv_d", d_dino)?;
        let ln = |store: &mut ParamStore, name: &str, v: f64| {
            store.add(format!("{prefix}.{name}"), Tensor::filled(1, d_head, v), ParamGroup::Other, true)
        };
        let ln_cd_gain = ln(store, "ln_cd.gain", 1.0)?;
        let ln_cd_bias = ln(store, "ln_cd.bias", 0.0)?;
        let ln_dc_gain = ln(store, "ln_dc.gain", 1.0)?;
        let ln_dc_bias = ln(store, "ln_dc.bias", 0.0)?;
        let mlp = Mlp::register(
            store,
            rng,
            MlpSpec {
                prefix: &format!("{prefix}.mlp"),
                d_in: 2 * d_head,
                d_hidden,
                d_out: d_clip,
                zero_output: true,
                trainable: true,
            },
        )?;
        Ok(Self {
            wq_c,
            wk_c,
            wv_c,
            wq_d,
            wk_d,
            wv_d,
            ln_cd_gain,
            ln_cd_bias,
            ln_dc_gain,
            ln_dc_bias,
            mlp,
            d_head,
            d_clip,
            d_dino,
        })
    }
}

/// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` over rows.
fn attend(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, d: usize) -> Result<Var, NumError> {
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.softmax(logits, Axis::Cols)?;
    tape.matmul(weights, v)
}

/// Fuses `f_c: N×D_c` with `f_d: N×D_d`; returns `N×D_c`.
pub fn atf_fuse(tape: &mut Tape<'_>, f_c: Var, f_d: Var, p: &AtfParams) -> Result<Var, NumError> {
    let [n, dc] = tape.shape(f_c);
    let [nd, dd] = tape.shape(f_d);
    if n != nd || dc != p.d_clip || dd != p.d_dino {
        return Err(NumError::Shape {
            op: "atf_fuse",
            detail: format!("clip {n}x{dc}, dino {nd}x{dd}, block expects D_c={} D_d={}", p.d_clip, p.d_dino),
        });
    }
    let wq_c = tape.param(p.wq_c);
    let wk_c = tape.param(p.wk_c);
    let wv_c = tape.param(p.wv_c);
    let wq_d = tape.param(p.wq_d);
    let wk_d = tape.param(p.wk_d);
    let wv_d = tape.param(p.wv_d);

    let q_c = tape.matmul(f_c, wq_c)?;
    let k_d = tape.matmul(f_d, wk_d)?;
    let v_d = tape.matmul(f_d, wv_d)?;
    let q_d = tape.matmul(f_d, wq_d)?;
    let k_c = tape.matmul(f_c, wk_c)?;
    let v_c = tape.matmul(f_c, wv_c)?;

    let c_to_d = attend(tape, q_c, k_d, v_d, p.d_head)?;
    let d_to_c = attend(tape, q_d, k_c, v_c, p.d_head)?;

    let (g1, b1) = (tape.param(p.ln_cd_gain), tape.param(p.ln_cd_bias));
    let (g2, b2) = (tape.param(p.ln_dc_gain), tape.param(p.ln_dc_bias));
    let c_to_d = tape.layer_norm(c_to_d, g1, b1, LN_EPS)?;
    let d_to_c = tape.layer_norm(d_to_c, g2, b2, LN_EPS)?;
    let joint = tape.concat_cols(&[c_to_d, d_to_c])?;
    let fused = p.mlp.forward(tape, joint)?;
    tape.add(f_c, fused)
}

/// All fusion blocks: one per local layer pair, then the global pair.
#[derive(Clone, Debug)]
pub struct HsvsParams {
    pub layers: Vec<AtfParams>,
    pub global: AtfParams,
}

impl HsvsParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        n_layers: usize,
        d_clip: usize,
        d_dino: usize,
        d_head: usize,
        d_hidden: usize,
    ) -> Result<Self, NumError> {
        let layers = (0..n_layers)
            .map(|l| AtfParams::register(store, rng, &format!("hsvs.layer{l}"), d_clip, d_dino, d_head, d_hidden))
            .collect::<Result<Vec<_>, _>>()?;
        let global = AtfParams::register(store, rng, "hsvs.global", d_clip, d_dino, d_head, d_hidden)?;
        Ok(Self { layers, global })
    }
}

/// Fused features on the tape.
#[derive(Clone, Debug)]
pub struct SynergyFeatures {
    /// `1 × D_c`.
    pub v_global: Var,
    /// `L` matrices of `N × D_c`.
    pub v_locals: Vec<Var>,
}

pub fn hsvs_forward(tape: &mut Tape<'_>, bundle: &FeatureBundle, params: &HsvsParams) -> Result<SynergyFeatures, NumError> {
    if bundle.n_layers() != params.layers.len() {
        return Err(NumError::Shape {
            op: "hsvs_forward",
            detail: format!("bundle has {} layers, model expects {}", bundle.n_layers(), params.layers.len()),
        });
    }
    let mut v_locals = Vec::with_capacity(params.layers.len());
    for ((fc, fd), p) in bundle.clip_locals.iter().zip(&bundle.dino_locals).zip(&params.layers) {
        let fc = tape.constant(fc.clone());
        let fd = tape.constant(fd.clone());
        v_locals.push(atf_fuse(tape, fc, fd, p)?);
    }
    let gc = tape.constant(bundle.clip_global.clone());
    let gd = tape.constant(bundle.dino_global.clone());
    let v_global = atf_fuse(tape, gc, gd, &params.global)?;
    Ok(SynergyFeatures { v_global, v_locals })
}
