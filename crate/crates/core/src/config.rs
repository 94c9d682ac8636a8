use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture knobs that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Attention width of every fusion block.
    pub d_head: usize,
    /// Fusion MLP hidden width; `None` means `2 * d_head`.
    pub d_hidden: Option<usize>,
    pub prompt_bg_len: usize,
    pub prompt_state_len: usize,
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Hidden width of the frozen toy text encoder.
    pub text_hidden: usize,
    pub d_latent: usize,
    pub n_latent_tokens: usize,
    pub d_key: usize,
    pub vae_hidden: usize,
    pub gate_hidden: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_head: 256,
            d_hidden: None,
            prompt_bg_len: 8,
            prompt_state_len: 4,
            n_normal: 3,
            n_abnormal: 3,
            text_hidden: 128,
            d_latent: 64,
            n_latent_tokens: 4,
            d_key: 64,
            vae_hidden: 128,
            gate_hidden: 64,
        }
    }
}

impl ArchConfig {
    /// Narrow attention for desk-scale synthetic runs.
    pub fn desk() -> Self {
        Self { d_head: 32, ..Self::default() }
    }

    pub fn hidden(&self) -> usize {
        self.d_hidden.unwrap_or(2 * self.d_head)
    }

    pub fn n_prompts(&self) -> usize {
        self.n_normal + self.n_abnormal
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_head", self.d_head),
            ("d_hidden", self.hidden()),
            ("prompt_bg_len", self.prompt_bg_len),
            ("prompt_state_len", self.prompt_state_len),
            ("n_normal", self.n_normal),
            ("n_abnormal", self.n_abnormal),
            ("text_hidden", self.text_hidden),
            ("d_latent", self.d_latent),
            ("n_latent_tokens", self.n_latent_tokens),
            ("d_key", self.d_key),
            ("vae_hidden", self.vae_hidden),
            ("gate_hidden", self.gate_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_head < 2 {
            return Err(Error::Config("d_head must be at least 2 for layer norm".into()));
        }
        if self.d_latent % self.n_latent_tokens != 0 {
            return Err(Error::Config(format!(
                "d_latent {} is not divisible by n_latent_tokens {}",
                self.d_latent, self.n_latent_tokens
            )));
        }
        Ok(())
    }
}

/// Full model shape: data-derived dimensions plus architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_clip: usize,
    pub d_dino: usize,
    pub n_layers: usize,
    pub arch: ArchConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_clip < 2 || self.d_dino == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!(
                "feature dims must be positive (d_clip >= 2): d_clip={} d_dino={} layers={}",
                self.d_clip, self.d_dino, self.n_layers
            )));
        }
        self.arch.validate()
    }
}

/// Which map the segmentation loss supervises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocalTarget {
    /// The fused mixture map only.
    Fused,
    /// Fused map plus the mean over per-layer maps.
    FusedAndLayers,
}

/// Inference-time scoring knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scoring {
    pub tau: f64,
    pub gamma: f64,
    pub top_k: usize,
}

impl Default for Scoring {
    fn default() -> Self {
        Self { tau: 0.07, gamma: 0.5, top_k: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_prompts: f64,
    pub lr_other: f64,
    /// KL weight inside the VAE loss.
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Cosine margin for prompt drift.
    pub xi: f64,
    pub gamma: f64,
    /// Focal focusing exponent.
    pub focal_gamma: f64,
    pub tau: f64,
    pub top_k: usize,
    pub grad_clip: f64,
    pub focal_target: FocalTarget,
    /// Parameter-name prefixes held fixed during training.
    pub frozen: Vec<String>,
    /// Categories excluded from training (zero-shot hold-outs).
    pub exclude_categories: Vec<String>,
    pub seed: u64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 8,
            lr_prompts: 5e-4,
            lr_other: 1e-4,
            beta: 0.1,
            lambda1: 1.0,
            lambda2: 0.5,
            xi: 0.85,
            gamma: 0.5,
            focal_gamma: 2.0,
            tau: 0.07,
            top_k: 1,
            grad_clip: 5.0,
            focal_target: FocalTarget::Fused,
            frozen: Vec::new(),
            exclude_categories: Vec::new(),
            seed: 0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self { arch: ArchConfig::desk(), ..Self::default() }
    }

    pub fn scoring(&self) -> Scoring {
        Scoring { tau: self.tau, gamma: self.gamma, top_k: self.top_k }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.epochs > 0, "epochs must be positive"),
            (self.batch_size > 0, "batch_size must be positive"),
            (self.lr_prompts > 0.0, "lr_prompts must be positive"),
            (self.lr_other > 0.0, "lr_other must be positive"),
            (self.beta >= 0.0, "beta must be nonnegative"),
            (self.lambda1 >= 0.0, "lambda1 must be nonnegative"),
            (self.lambda2 >= 0.0, "lambda2 must be nonnegative"),
            ((0.0..=1.0).contains(&self.gamma), "gamma must lie in [0, 1]"),
            (self.focal_gamma >= 0.0, "focal_gamma must be nonnegative"),
            (self.tau > 0.0, "tau must be positive"),
            (self.top_k > 0, "top_k must be positive"),
            (self.grad_clip > 0.0, "grad_clip must be positive"),
            (self.xi.is_finite(), "xi must be finite"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(Error::Config((*msg).to_string()));
        }
        self.arch.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs, c.batch_size), (15, 8));
        assert_eq!((c.lr_prompts, c.lr_other), (5e-4, 1e-4));
        assert_eq!((c.beta, c.lambda1, c.lambda2, c.xi, c.gamma), (0.1, 1.0, 0.5, 0.85, 0.5));
        assert_eq!(c.arch.n_normal + c.arch.n_abnormal, 6);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"epochs": 2, "learning_rate": 1}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"epochs": 2}"#).unwrap();
        assert_eq!(ok.batch_size, 8);
    }

    #[test]
    fn latent_tokenization_must_divide() {
        let a = ArchConfig { d_latent: 10, n_latent_tokens: 4, ..ArchConfig::default() };
        assert!(a.validate().is_err());
    }
}
