//! Finite-difference verification of the full training objective.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ArchConfig, ModelConfig, TrainConfig};
use crate::data::{FeatureBundle, Mask};
use crate::error::Result;
use crate::model::Model;
use crate::numcore::{check_params, Axis, ParamCheck, ParamGroup, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective::{batch_loss, batch_loss_anchored, class_loss, focal_loss};

/// Worst finite-difference disagreement within one module.
#[derive(Clone, Debug)]
pub struct ModuleCheck {
    pub module: String,
    pub worst_rel_error: f64,
    pub worst_param: String,
    pub tensors: usize,
    pub entries: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub modules: Vec<ModuleCheck>,
    pub params: Vec<ParamCheck>,
    pub elapsed: Duration,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.modules.iter().map(|m| m.worst_rel_error).fold(0.0, f64::max)
    }
}

/// Small enough that every entry can be perturbed in well under a second.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d_clip: 8,
        d_dino: 12,
        n_layers: 2,
        arch: ArchConfig {
            d_head: 4,
            d_hidden: Some(8),
            prompt_bg_len: 2,
            prompt_state_len: 2,
            n_normal: 2,
            n_abnormal: 2,
            text_hidden: 8,
            d_latent: 8,
            n_latent_tokens: 2,
            d_key: 4,
            vae_hidden: 8,
            gate_hidden: 4,
        },
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize, std: f64) -> Tensor {
    Tensor::new(r, c, (0..r * c).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()).expect("positive dims")
}

/// Random bundles on a 3×3 grid; the second one is anomalous.
pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Vec<FeatureBundle> {
    let grid = (3, 3);
    let n = grid.0 * grid.1;
    (0..2u8)
        .map(|label| {
            let mut mask = Mask::empty(grid.0, grid.1);
            if label == 1 {
                mask.data[rng.random_range(0..n)] = 1;
                mask.data[4] = 1;
            }
            FeatureBundle {
                clip_global: random_tensor(rng, 1, cfg.d_clip, 1.0),
                clip_locals: (0..cfg.n_layers).map(|_| random_tensor(rng, n, cfg.d_clip, 1.0)).collect(),
                dino_global: random_tensor(rng, 1, cfg.d_dino, 1.0),
                dino_locals: (0..cfg.n_layers).map(|_| random_tensor(rng, n, cfg.d_dino, 1.0)).collect(),
                grid,
                label,
                mask: Some(mask),
                category: format!("check{label}"),
                source_id: format!("check/{label}"),
            }
        })
        .collect()
}

/// Moves every trainable value off its initialization so zero-initialized
/// branches and the closed gate carry gradient through all paths.
pub fn perturb_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, std: f64) {
    let ids: Vec<_> = store.ids().filter(|&id| store.entry(id).trainable).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += std * Distribution::<f64>::sample(&StandardNormal, rng);
        }
    }
}

fn module_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

fn summarize(module: &str, checks: &[&ParamCheck]) -> ModuleCheck {
    let worst = checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    ModuleCheck {
        module: module.to_string(),
        worst_rel_error: worst.map_or(0.0, |c| c.rel_error),
        worst_param: worst.map_or_else(String::new, |c| c.name.clone()),
        tensors: checks.len(),
        entries: checks.iter().map(|c| c.entries).sum(),
    }
}

/// Checks the loss functions alone against their inputs.
fn objective_checks(rng: &mut ChaCha8Rng, h: f64) -> Result<Vec<ParamCheck>> {
    let mut store = ParamStore::new();
    let logits = store.add("objective.map_logits", random_tensor(rng, 6, 1, 1.0), ParamGroup::Other, true)?;
    let score = store.add("objective.score", random_tensor(rng, 1, 1, 1.0), ParamGroup::Other, true)?;
    let target = Tensor::new(6, 1, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0])?;
    fn build<'a>(s: &'a ParamStore, logits: ParamId, score: ParamId, target: &Tensor) -> Result<(Tape<'a>, Var)> {
        let mut t = Tape::with_params(s);
        let l = t.param(logits);
        let p = t.sigmoid(l)?;
        let focal = focal_loss(&mut t, p, target, 2.0)?;
        let sv = t.param(score);
        let c1 = class_loss(&mut t, sv, 1.0)?;
        let c0 = class_loss(&mut t, sv, 0.0)?;
        let c = t.concat_cols(&[focal, c1, c0])?;
        let w = t.constant(Tensor::row_vector(vec![1.0, 0.7, 0.3])?);
        let c = t.mul(c, w)?;
        let total = t.sum(c, Axis::All)?;
        Ok((t, total))
    }
    let (mut tape, total) = build(&store, logits, score, &target)?;
    tape.backward(total)?;
    let grads = tape.param_grads();
    check_params(&store, &grads, h, |s| build(s, logits, score, &target).map(|(t, v)| t.value(v).item()))
}

/// Central differences with step `h` over every trainable tensor of a
/// perturbed tiny model on a two-sample batch.
pub fn grad_check(seed: u64, h: f64) -> Result<GradCheckReport> {
    let start = Instant::now();
    let mcfg = tiny_model_config();
    let mut model = Model::new(mcfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    perturb_params(&mut model.store, &mut rng, 0.3);
    let alpha = model.inject.alpha;
    model.store.set(alpha, Tensor::scalar(0.7))?;
    let batch = random_batch(&mut rng, &mcfg);
    let refs: Vec<&FeatureBundle> = batch.iter().collect();
    let eps: Vec<Tensor> = refs.iter().map(|_| random_tensor(&mut rng, 1, mcfg.arch.d_latent, 1.0)).collect();
    // a smooth temperature keeps the sigmoid maps away from the focal clamp
    let cfg = TrainConfig { tau: 0.5, xi: 0.99, arch: mcfg.arch.clone(), ..TrainConfig::default() };

    let mut tape = Tape::with_params(&model.store);
    let loss = batch_loss(&mut tape, &model, &refs, &eps, &cfg)?;
    tape.backward(loss.total)?;
    let grads = tape.param_grads();
    drop(tape);
    let anchors = loss.anchors;

    let mut params = check_params(&model.store, &grads, h, |s| -> Result<f64> {
        let mut t = Tape::with_params(s);
        let l = batch_loss_anchored(&mut t, &model, &refs, &eps, &cfg, Some(&anchors))?;
        Ok(t.value(l.total).item())
    })?;
    params.extend(objective_checks(&mut rng, h)?);

    let mut names: Vec<&str> = params.iter().map(|p| module_of(&p.name)).collect();
    names.dedup();
    let modules = names
        .iter()
        .map(|&m| summarize(m, &params.iter().filter(|p| module_of(&p.name) == m).collect::<Vec<_>>()))
        .collect();
    Ok(GradCheckReport { modules, params, elapsed: start.elapsed() })
}
