//! Mini-batch training with two learning-rate groups and cosine decay.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::FeatureBundle;
use crate::error::{Error, Result};
use crate::io::RngSnapshot;
use crate::model::Model;
use crate::numcore::{Adam, CosineSchedule, NumError, ParamGroup, Tape, Tensor};
use crate::objective::{batch_loss, LossBreakdown};

/// Generator streams split off the training seed.
pub const DATA_STREAM: u64 = 1;
pub const NOISE_STREAM: u64 = 2;

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub seg: f64,
    pub cls: f64,
    pub vae: f64,
    pub reg: f64,
    pub total: f64,
    /// Learning rate of the non-prompt group at this step.
    pub lr: f64,
    /// Smallest per-row cosine between refined and initial prompts in the batch.
    pub min_cos: f64,
}

impl StepRecord {
    fn new(epoch: usize, step: usize, l: LossBreakdown, lr: f64, min_cos: f64) -> Self {
        Self { epoch, step, seg: l.seg, cls: l.cls, vae: l.vae, reg: l.reg, total: l.total, lr, min_cos }
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<StepRecord>,
    pub rng: RngSnapshot,
}

/// Model shape implied by the data and the architecture in `cfg`.
pub fn model_config_for(data: &[FeatureBundle], cfg: &TrainConfig) -> Result<ModelConfig> {
    let first = data.first().ok_or_else(|| Error::Data("empty training set".into()))?;
    Ok(ModelConfig { d_clip: first.d_clip(), d_dino: first.d_dino(), n_layers: first.n_layers(), arch: cfg.arch.clone() })
}

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

/// Trains a fresh model seeded from `cfg.seed`.
pub fn train(data: &[FeatureBundle], cfg: &TrainConfig) -> Result<Trained> {
    train_with(data, cfg, |_| {})
}

/// [`train`] with a callback after every step.
pub fn train_with(data: &[FeatureBundle], cfg: &TrainConfig, mut on_step: impl FnMut(&StepRecord)) -> Result<Trained> {
    cfg.validate()?;
    let data: Vec<&FeatureBundle> = data.iter().filter(|b| !cfg.exclude_categories.contains(&b.category)).collect();
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mcfg = model_config_for(&[data[0].clone()], cfg)?;
    let mut model = Model::new(mcfg, cfg.seed)?;
    for b in &data {
        model.check_bundle(b)?;
    }
    for prefix in &cfg.frozen {
        model.store.set_trainable_prefix(prefix, false);
    }

    let mut order_rng = stream(cfg.seed, DATA_STREAM);
    let mut noise_rng = stream(cfg.seed, NOISE_STREAM);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let schedule = CosineSchedule { total_steps: cfg.epochs * steps_per_epoch };
    let mut adam = Adam::default();
    let mut history = Vec::with_capacity(schedule.total_steps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let d_z = model.d_latent();

    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureBundle> = chunk.iter().map(|&i| data[i]).collect();
            let eps: Vec<Tensor> = batch
                .iter()
                .map(|_| {
                    let v = (0..d_z).map(|_| StandardNormal.sample(&mut noise_rng)).collect();
                    Tensor::row_vector(v).expect("d_z > 0")
                })
                .collect();
            let diverged = |source: NumError| Error::Diverged { epoch, step, source };
            let (breakdown, min_cos, mut grads) = {
                let mut tape = Tape::with_params(&model.store);
                let loss = batch_loss(&mut tape, &model, &batch, &eps, cfg).map_err(|e| match e {
                    Error::Num(n @ NumError::NonFinite { .. }) => diverged(n),
                    other => other,
                })?;
                tape.backward(loss.total).map_err(diverged)?;
                (loss.breakdown(&tape), loss.min_cosine(&tape), tape.param_grads())
            };
            grads.clip_global_norm(cfg.grad_clip);
            let lr_prompt = schedule.lr(cfg.lr_prompts, step);
            let lr_other = schedule.lr(cfg.lr_other, step);
            adam.step(&mut model.store, &grads, |g| match g {
                ParamGroup::Prompt => lr_prompt,
                ParamGroup::Other => lr_other,
            })?;
            let rec = StepRecord::new(epoch, step, breakdown, lr_other, min_cos);
            on_step(&rec);
            history.push(rec);
            step += 1;
        }
    }
    let rng = RngSnapshot {
        seed: cfg.seed,
        streams: vec![(DATA_STREAM, order_rng.get_word_pos()), (NOISE_STREAM, noise_rng.get_word_pos())],
    };
    Ok(Trained { model, history, rng })
}
