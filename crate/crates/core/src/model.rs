//! The full detector: parameters plus the forward pass from a feature
//! bundle to anomaly maps and image scores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, Scoring};
use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::hsvs::{hsvs_forward, HsvsParams};
use crate::layers::{Mlp, MlpSpec};
use crate::numcore::{NumError, ParamGroup, ParamStore, Tape, Tensor, Var, LN_EPS};
use crate::vcpg::{
    class_token, encode_prompts, gated_inject, reparameterize, text_latent_attention, vae_encode, InjectionParams,
    LatentGaussian, PrecomputedText, PromptBank, TextEncoder, VaeParams,
};
use crate::vtam::{
    local_evidence, moe_aggregate, probability_map, raw_anomaly_map, scale_gate, spatial_gate, final_score, GateParams,
    PromptLabels, ScoreVars,
};

/// Name prefix of externally supplied prompt embeddings.
pub const TEXT_ROWS_PREFIX: &str = "vcpg.text_rows.";

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub hsvs: HsvsParams,
    pub prompts: PromptBank,
    /// Frozen copy of the initial prompt vectors.
    pub static_prompts: PromptBank,
    pub text: TextEncoder,
    pub vae: VaeParams,
    pub inject: InjectionParams,
    pub gates: GateParams,
}

/// Every intermediate the losses and diagnostics need, on the tape.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub v_global: Var,
    pub v_locals: Vec<Var>,
    pub t_init: Var,
    pub t_final: Var,
    pub latent: LatentGaussian,
    /// Per-layer anomaly probabilities, `N × 1` each.
    pub layer_maps: Vec<Var>,
    pub spatial_masks: Vec<Var>,
    /// `1 × L`.
    pub scale_weights: Var,
    /// Fused map, `N × 1`.
    pub p_map: Var,
    pub scores: ScoreVars,
}

impl Model {
    /// Fresh model; every random initial value is drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let a = &config.arch;
        let d_c = config.d_clip;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let hsvs = HsvsParams::register(&mut store, &mut rng, config.n_layers, d_c, config.d_dino, a.d_head, a.hidden())?;
        let prompts = PromptBank::register(
            &mut store,
            &mut rng,
            "vcpg.prompt",
            d_c,
            a.prompt_bg_len,
            a.prompt_state_len,
            a.n_normal,
            a.n_abnormal,
            true,
        )?;
        let seq_len = a.prompt_bg_len + a.prompt_state_len + 1;
        let text = Mlp::register(
            &mut store,
            &mut rng,
            MlpSpec { prefix: "vcpg.text", d_in: seq_len * d_c, d_hidden: a.text_hidden, d_out: d_c, zero_output: false, trainable: false },
        )?;
        let vae = VaeParams::register(&mut store, &mut rng, d_c, a.d_latent, a.vae_hidden)?;
        let inject = InjectionParams::register(&mut store, &mut rng, d_c, a.d_latent, a.n_latent_tokens, a.d_key)?;
        let gates = GateParams::register(&mut store, &mut rng, d_c, config.n_layers, a.gate_hidden)?;

        let static_prompts = copy_bank(&mut store, &prompts, "static.prompt")?;
        Ok(Self { config, store, hsvs, prompts, static_prompts, text: TextEncoder::Toy(text), vae, inject, gates })
    }

    /// Replaces the toy text encoder with fixed per-category embeddings.
    /// Rows are stored as frozen parameters so checkpoints carry them.
    pub fn use_precomputed_text(&mut self, table: PrecomputedText) -> Result<()> {
        let p = self.config.arch.n_prompts();
        for (cat, rows) in &table.rows {
            if rows.shape() != [p, self.config.d_clip] {
                return Err(Error::Config(format!(
                    "text embeddings for `{cat}` are {:?}, expected [{p}, {}]",
                    rows.shape(),
                    self.config.d_clip
                )));
            }
            let name = format!("{TEXT_ROWS_PREFIX}{cat}");
            match self.store.id(&name) {
                Some(id) => self.store.set(id, rows.clone())?,
                None => {
                    self.store.add(name, rows.clone(), ParamGroup::Prompt, false)?;
                }
            }
        }
        self.text = TextEncoder::Precomputed(self.precomputed_from_store());
        Ok(())
    }

    fn precomputed_from_store(&self) -> PrecomputedText {
        let rows = self
            .store
            .entries()
            .iter()
            .filter_map(|e| e.name.strip_prefix(TEXT_ROWS_PREFIX).map(|cat| (cat.to_string(), e.value.clone())))
            .collect();
        PrecomputedText { rows }
    }

    /// Rebuilds the structure for `config` and overwrites every value by
    /// name. Unknown names, missing names and shape changes are errors.
    pub fn from_named(config: ModelConfig, seed: u64, params: &[(String, Tensor)]) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let mut text_rows = PrecomputedText::default();
        for (name, value) in params {
            if let Some(cat) = name.strip_prefix(TEXT_ROWS_PREFIX) {
                text_rows.rows.insert(cat.to_string(), value.clone());
            }
        }
        if !text_rows.rows.is_empty() {
            model.use_precomputed_text(text_rows)?;
        }
        let mut seen = vec![false; model.store.len()];
        for (name, value) in params {
            let id = model.store.id(name).ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
            model.store.set(id, value.clone())?;
            seen[id.index()] = true;
        }
        if let Some(id) = model.store.ids().find(|id| !seen[id.index()]) {
            return Err(Error::Config(format!("parameter `{}` missing", model.store.name(id))));
        }
        Ok(model)
    }

    pub fn labels(&self) -> PromptLabels {
        PromptLabels { n_normal: self.config.arch.n_normal, n_abnormal: self.config.arch.n_abnormal }
    }

    pub fn d_latent(&self) -> usize {
        self.config.arch.d_latent
    }

    pub fn check_bundle(&self, b: &FeatureBundle) -> Result<()> {
        b.validate()?;
        if b.d_clip() != self.config.d_clip || b.d_dino() != self.config.d_dino || b.n_layers() != self.config.n_layers {
            return Err(Error::Data(format!(
                "{}: bundle dims D_c={} D_d={} L={} do not match model D_c={} D_d={} L={}",
                b.source_id,
                b.d_clip(),
                b.d_dino(),
                b.n_layers(),
                self.config.d_clip,
                self.config.d_dino,
                self.config.n_layers
            )));
        }
        Ok(())
    }

    /// Initial prompt embeddings `T_init` for `category`.
    pub fn text_embeddings(&self, tape: &mut Tape<'_>, category: &str) -> std::result::Result<Var, NumError> {
        let cls = class_token(category, self.config.d_clip);
        encode_prompts(tape, &self.prompts, &cls, category, &self.text, self.config.d_clip)
    }

    /// Frozen reference embeddings: the gate-closed output an untrained
    /// model produces for `category`.
    pub fn static_embeddings(&self, category: &str) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.store);
        let cls = class_token(category, self.config.d_clip);
        let t = encode_prompts(&mut tape, &self.static_prompts, &cls, category, &self.text, self.config.d_clip)?;
        let d = self.config.d_clip;
        let gain = tape.constant(Tensor::filled(1, d, 1.0));
        let bias = tape.constant(Tensor::zeros(1, d));
        let t = tape.layer_norm(t, gain, bias, LN_EPS)?;
        Ok(tape.value(t).clone())
    }

    /// Forward pass for one bundle. `eps` is the `1 × d_z` reparameterization
    /// noise; pass zeros for deterministic scoring.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        b: &FeatureBundle,
        eps: &Tensor,
        scoring: Scoring,
    ) -> std::result::Result<ForwardVars, NumError> {
        let syn = hsvs_forward(tape, b, &self.hsvs)?;

        let t_init = self.text_embeddings(tape, &b.category)?;
        let (mu, logvar) = vae_encode(tape, syn.v_global, &self.vae)?;
        let z = reparameterize(tape, mu, logvar, eps)?;
        let delta = text_latent_attention(tape, t_init, z, &self.inject)?;
        let t_final = gated_inject(tape, t_init, delta, &self.inject)?;

        let labels = self.labels();
        let mut layer_maps = Vec::with_capacity(syn.v_locals.len());
        let mut spatial_masks = Vec::with_capacity(syn.v_locals.len());
        for (l, &v) in syn.v_locals.iter().enumerate() {
            let sim = raw_anomaly_map(tape, v, t_final)?;
            layer_maps.push(probability_map(tape, sim, labels, scoring.tau)?);
            spatial_masks.push(spatial_gate(tape, v, &self.gates, l)?);
        }
        let scale_weights = scale_gate(tape, syn.v_global, &self.gates)?;
        let p_map = moe_aggregate(tape, &layer_maps, &spatial_masks, scale_weights)?;
        let s_local = local_evidence(tape, p_map, scoring.top_k)?;
        let scores = final_score(tape, syn.v_global, t_final, s_local, scoring.gamma, labels, scoring.tau)?;
        Ok(ForwardVars {
            v_global: syn.v_global,
            v_locals: syn.v_locals,
            t_init,
            t_final,
            latent: LatentGaussian { mu, logvar, z },
            layer_maps,
            spatial_masks,
            scale_weights,
            p_map,
            scores,
        })
    }

    /// Named parameter values in registration order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        self.store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect()
    }
}

fn copy_bank(store: &mut ParamStore, src: &PromptBank, prefix: &str) -> std::result::Result<PromptBank, NumError> {
    let mut copy = |id, suffix: String| {
        let v = store.value(id).clone();
        store.add(format!("{prefix}.{suffix}"), v, ParamGroup::Prompt, false)
    };
    let background = copy(src.background, "bg".into())?;
    let normal = src.normal.iter().enumerate().map(|(i, &id)| copy(id, format!("normal{i}"))).collect::<std::result::Result<_, _>>()?;
    let abnormal =
        src.abnormal.iter().enumerate().map(|(i, &id)| copy(id, format!("abnormal{i}"))).collect::<std::result::Result<_, _>>()?;
    Ok(PromptBank { background, normal, abnormal })
}
