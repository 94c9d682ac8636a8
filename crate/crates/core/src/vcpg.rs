//! Vision-conditioned prompt generation.
//!
//! Learnable prompt token sequences (shared background + per-prompt state)
//! are encoded into text embeddings, then shifted by an image-conditioned
//! residual: the fused global feature is encoded into a Gaussian latent,
//! sampled, split into tokens and attended to by the prompt embeddings.
//! A scalar gate (starting closed) controls how much of that residual
//! reaches the final prompt embeddings.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::layers::{variance_scaled, Mlp, MlpSpec};
use crate::numcore::{Axis, NumError, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var, COSINE_FLOOR, LN_EPS};

/// Clamp range for the encoder's log-variance.
pub const LOGVAR_CLAMP: (f64, f64) = (-10.0, 10.0);
/// Std of the initial prompt token vectors.
const PROMPT_INIT_STD: f64 = 0.02;

/// Learnable prompt vectors: `[V]_bg ∥ [V]_state ∥ [CLASS]` per prompt.
#[derive(Clone, Debug)]
pub struct PromptBank {
    /// `L_p × d_tok`, shared by every prompt.
    pub background: ParamId,
    /// One `L_s × d_tok` sequence per normal prompt.
    pub normal: Vec<ParamId>,
    pub abnormal: Vec<ParamId>,
}

impl PromptBank {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d_tok: usize,
        bg_len: usize,
        state_len: usize,
        n_normal: usize,
        n_abnormal: usize,
        trainable: bool,
    ) -> Result<Self, NumError> {
        let normal_dist = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let mut draw = |r: usize| {
            Tensor::new(r, d_tok, (0..r * d_tok).map(|_| normal_dist.sample(rng)).collect()).expect("positive dims")
        };
        let background = store.add(format!("{prefix}.bg"), draw(bg_len), ParamGroup::Prompt, trainable)?;
        let normal = (0..n_normal)
            .map(|i| store.add(format!("{prefix}.normal{i}"), draw(state_len), ParamGroup::Prompt, trainable))
            .collect::<Result<Vec<_>, _>>()?;
        let abnormal = (0..n_abnormal)
            .map(|i| store.add(format!("{prefix}.abnormal{i}"), draw(state_len), ParamGroup::Prompt, trainable))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { background, normal, abnormal })
    }

    /// State sequences in row order: normal prompts first.
    pub fn states(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.normal.iter().chain(&self.abnormal).copied()
    }

    pub fn len(&self) -> usize {
        self.normal.len() + self.abnormal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed class-name token for a category, derived from its name.
pub fn class_token(category: &str, d_tok: usize) -> Tensor {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in category.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(h);
    let dist = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
    Tensor::new(1, d_tok, (0..d_tok).map(|_| dist.sample(&mut rng)).collect()).expect("positive dims")
}

/// Externally computed prompt embeddings keyed by category; `"*"` is the
/// fallback for unlisted categories.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrecomputedText {
    pub rows: BTreeMap<String, Tensor>,
}

impl PrecomputedText {
    pub fn lookup(&self, category: &str) -> Option<&Tensor> {
        self.rows.get(category).or_else(|| self.rows.get("*"))
    }
}

/// Maps prompt token sequences to `D_c` embeddings.
#[derive(Clone, Debug)]
pub enum TextEncoder {
    /// Frozen random MLP over the flattened token sequence.
    Toy(Mlp),
    /// Fixed embeddings; prompt vectors receive no gradient through this path.
    Precomputed(PrecomputedText),
}

/// Encodes every prompt; returns `P × D_c`, normal rows first.
pub fn encode_prompts(
    tape: &mut Tape<'_>,
    bank: &PromptBank,
    class_tok: &Tensor,
    category: &str,
    encoder: &TextEncoder,
    d_clip: usize,
) -> Result<Var, NumError> {
    let out = match encoder {
        TextEncoder::Toy(mlp) => {
            let bg = tape.param(bank.background);
            let cls = tape.constant(class_tok.clone());
            let mut flat = Vec::with_capacity(bank.len());
            for state in bank.states() {
                let s = tape.param(state);
                let seq = tape.concat_rows(&[bg, s, cls])?;
                let [r, c] = tape.shape(seq);
                flat.push(tape.reshape(seq, 1, r * c)?);
            }
            let stacked = tape.concat_rows(&flat)?;
            mlp.forward(tape, stacked)?
        }
        TextEncoder::Precomputed(table) => {
            let rows = table
                .lookup(category)
                .ok_or_else(|| NumError::Invalid(format!("no precomputed text embeddings for `{category}`")))?;
            if rows.rows() != bank.len() {
                return Err(NumError::Shape {
                    op: "encode_prompts",
                    detail: format!("{} precomputed rows for {} prompts", rows.rows(), bank.len()),
                });
            }
            tape.constant(rows.clone())
        }
    };
    if tape.shape(out)[1] != d_clip {
        return Err(NumError::Shape {
            op: "encode_prompts",
            detail: format!("encoder emits width {}, expected D_c={d_clip}", tape.shape(out)[1]),
        });
    }
    Ok(out)
}

/// Variational encoder/decoder around the global fused feature.
#[derive(Clone, Debug)]
pub struct VaeParams {
    pub mu: Mlp,
    pub logvar: Mlp,
    pub decoder: Mlp,
}

impl VaeParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_clip: usize,
        d_latent: usize,
        hidden: usize,
    ) -> Result<Self, NumError> {
        let enc = |prefix: &'static str| MlpSpec { prefix, d_in: d_clip, d_hidden: hidden, d_out: d_latent, zero_output: true, trainable: true };
        let mu = Mlp::register(store, rng, enc("vcpg.vae.mu"))?;
        let logvar = Mlp::register(store, rng, enc("vcpg.vae.logvar"))?;
        let decoder = Mlp::register(
            store,
            rng,
            MlpSpec { prefix: "vcpg.vae.dec", d_in: d_latent, d_hidden: hidden, d_out: d_clip, zero_output: false, trainable: true },
        )?;
        Ok(Self { mu, logvar, decoder })
    }
}

/// Posterior parameters and the sampled latent, all `1 × d_z`.
#[derive(Clone, Copy, Debug)]
pub struct LatentGaussian {
    pub mu: Var,
    pub logvar: Var,
    pub z: Var,
}

pub fn vae_encode(tape: &mut Tape<'_>, v_global: Var, p: &VaeParams) -> Result<(Var, Var), NumError> {
    let mu = p.mu.forward(tape, v_global)?;
    let logvar = p.logvar.forward(tape, v_global)?;
    let logvar = tape.clamp(logvar, LOGVAR_CLAMP.0, LOGVAR_CLAMP.1)?;
    Ok((mu, logvar))
}

/// `z = μ + ε ⊙ exp(log σ² / 2)`.
pub fn reparameterize(tape: &mut Tape<'_>, mu: Var, logvar: Var, eps: &Tensor) -> Result<Var, NumError> {
    if tape.shape(mu) != eps.shape() || tape.shape(logvar) != eps.shape() {
        return Err(NumError::Shape {
            op: "reparameterize",
            detail: format!("mu {:?}, logvar {:?}, eps {:?}", tape.shape(mu), tape.shape(logvar), eps.shape()),
        });
    }
    let half = tape.scale(logvar, 0.5)?;
    let sigma = tape.exp(half)?;
    let e = tape.constant(eps.clone());
    let noise = tape.mul(e, sigma)?;
    tape.add(mu, noise)
}

/// Loss terms of the variational branch.
#[derive(Clone, Copy, Debug)]
pub struct VaeLoss {
    pub recon: Var,
    pub kl: Var,
    /// `recon + β·kl`.
    pub total: Var,
}

/// `‖v − D(z)‖² + β · ½Σ(μ² + σ² − 1 − log σ²)`.
pub fn vae_loss(tape: &mut Tape<'_>, v_global: Var, latent: &LatentGaussian, p: &VaeParams, beta: f64) -> Result<VaeLoss, NumError> {
    let recon_v = p.decoder.forward(tape, latent.z)?;
    let diff = tape.sub(v_global, recon_v)?;
    let sq = tape.square(diff)?;
    let recon = tape.sum(sq, Axis::All)?;
    let kl = kl_standard_normal(tape, latent.mu, latent.logvar)?;
    let weighted = tape.scale(kl, beta)?;
    let total = tape.add(recon, weighted)?;
    Ok(VaeLoss { recon, kl, total })
}

/// `KL(N(μ, σ²) ‖ N(0, I)) = ½Σ(μ² + σ² − 1 − log σ²)`.
pub fn kl_standard_normal(tape: &mut Tape<'_>, mu: Var, logvar: Var) -> Result<Var, NumError> {
    let mu2 = tape.square(mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let b = tape.offset(b, -1.0)?;
    let s = tape.sum(b, Axis::All)?;
    tape.scale(s, 0.5)
}

/// Text-latent cross-attention and gate.
#[derive(Clone, Debug)]
pub struct InjectionParams {
    /// `D_c × d_k`.
    pub wq: ParamId,
    /// `(d_z / n_z) × d_k`.
    pub wk: ParamId,
    /// `(d_z / n_z) × D_c`.
    pub wv: ParamId,
    /// `1 × 1`, starts at exactly 0.
    pub alpha: ParamId,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub n_latent_tokens: usize,
    pub d_key: usize,
}

impl InjectionParams {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        d_clip: usize,
        d_latent: usize,
        n_latent_tokens: usize,
        d_key: usize,
    ) -> Result<Self, NumError> {
        if n_latent_tokens == 0 || d_latent % n_latent_tokens != 0 {
            return Err(NumError::Invalid(format!("d_z={d_latent} is not divisible into {n_latent_tokens} tokens")));
        }
        let d_tok = d_latent / n_latent_tokens;
        let g = ParamGroup::Other;
        let wq = store.add("vcpg.inject.wq", variance_scaled(rng, d_clip, d_key), g, true)?;
        let wk = store.add("vcpg.inject.wk", variance_scaled(rng, d_tok, d_key), g, true)?;
        let wv = store.add("vcpg.inject.wv", variance_scaled(rng, d_tok, d_clip), g, true)?;
        let alpha = store.add("vcpg.inject.alpha", Tensor::scalar(0.0), g, true)?;
        let ln_gain = store.add("vcpg.inject.ln.gain", Tensor::filled(1, d_clip, 1.0), g, true)?;
        let ln_bias = store.add("vcpg.inject.ln.bias", Tensor::zeros(1, d_clip), g, true)?;
        Ok(Self { wq, wk, wv, alpha, ln_gain, ln_bias, n_latent_tokens, d_key })
    }
}

/// `softmax(Q_text K_zᵀ / √d_k) V_z` with `z` split into `n_z` tokens.
pub fn text_latent_attention(tape: &mut Tape<'_>, t_init: Var, z: Var, p: &InjectionParams) -> Result<Var, NumError> {
    let d_z = tape.shape(z)[1];
    if p.n_latent_tokens == 0 || d_z % p.n_latent_tokens != 0 {
        return Err(NumError::Invalid(format!("latent width {d_z} is not divisible into {} tokens", p.n_latent_tokens)));
    }
    let tokens = tape.reshape(z, p.n_latent_tokens, d_z / p.n_latent_tokens)?;
    let (wq, wk, wv) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv));
    let q = tape.matmul(t_init, wq)?;
    let k = tape.matmul(tokens, wk)?;
    let v = tape.matmul(tokens, wv)?;
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (p.d_key as f64).sqrt())?;
    let w = tape.softmax(logits, Axis::Cols)?;
    tape.matmul(w, v)
}

/// `LayerNorm(T_init + α·δ)` row-wise.
pub fn gated_inject(tape: &mut Tape<'_>, t_init: Var, delta: Var, p: &InjectionParams) -> Result<Var, NumError> {
    let alpha = tape.param(p.alpha);
    let gated = tape.scale_by(delta, alpha)?;
    let sum = tape.add(t_init, gated)?;
    let (g, b) = (tape.param(p.ln_gain), tape.param(p.ln_bias));
    tape.layer_norm(sum, g, b, LN_EPS)
}

/// Mean over rows of `max(0, ξ − cos(T_final, sg(T_init)))`.
pub fn margin_reg_loss(tape: &mut Tape<'_>, t_final: Var, t_init: Var, xi: f64) -> Result<Var, NumError> {
    let anchor = tape.detach(t_init);
    margin_to_anchor(tape, t_final, anchor, xi)
}

/// Margin loss against an anchor that is already a constant.
pub fn margin_to_anchor(tape: &mut Tape<'_>, t_final: Var, anchor: Var, xi: f64) -> Result<Var, NumError> {
    let cos = tape.cosine_rows(t_final, anchor, COSINE_FLOOR)?;
    margin_from_cosines(tape, cos, xi)
}

/// Hinge part of the margin loss, given the per-row cosine column.
pub fn margin_from_cosines(tape: &mut Tape<'_>, cos: Var, xi: f64) -> Result<Var, NumError> {
    let neg = tape.scale(cos, -1.0)?;
    let gap = tape.offset(neg, xi)?;
    let hinge = tape.relu(gap)?;
    tape.mean(hinge, Axis::All)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::row_vector(v.to_vec()).unwrap()
    }

    #[test]
    fn reparameterize_examples() {
        let mut t = Tape::new();
        let mu = t.constant(row(&[1.0, 2.0]));
        let lv = t.constant(row(&[0.0, 0.0]));
        let z = reparameterize(&mut t, mu, lv, &row(&[0.5, -1.0])).unwrap();
        assert_eq!(t.value(z).data(), &[1.5, 1.0]);
        let lv = t.constant(row(&[0.7, -3.0]));
        let z = reparameterize(&mut t, mu, lv, &row(&[0.0, 0.0])).unwrap();
        assert_eq!(t.value(z).data(), &[1.0, 2.0]);
        assert!(reparameterize(&mut t, mu, lv, &row(&[0.0])).is_err());
    }

    #[test]
    fn kl_of_unit_mean_is_half() {
        let mut t = Tape::new();
        let mu = t.constant(row(&[1.0]));
        let lv = t.constant(row(&[0.0]));
        let kl = kl_standard_normal(&mut t, mu, lv).unwrap();
        assert_eq!(t.value(kl).item(), 0.5);
        let mu = t.constant(row(&[0.0, 0.0]));
        let lv = t.constant(row(&[0.0, 0.0]));
        let kl = kl_standard_normal(&mut t, mu, lv).unwrap();
        assert_eq!(t.value(kl).item(), 0.0);
    }

    #[test]
    fn margin_examples() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap());
        let l = margin_reg_loss(&mut t, a, a, 0.85).unwrap();
        assert_eq!(t.value(l).item(), 0.0);

        // cos = 0.5 on both rows
        let f = t.constant(Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let s3 = 3f64.sqrt();
        let i = t.constant(Tensor::new(2, 2, vec![0.5, s3 / 2.0, s3 / 2.0, 0.5]).unwrap());
        let l = margin_reg_loss(&mut t, f, i, 0.85).unwrap();
        assert!((t.value(l).item() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn class_token_is_stable_per_name() {
        assert_eq!(class_token("bottle", 8), class_token("bottle", 8));
        assert_ne!(class_token("bottle", 8), class_token("cable", 8));
    }
}
