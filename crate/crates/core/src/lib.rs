//! Zero-shot anomaly detection on frozen dual-encoder patch features.
//!
//! The pipeline fuses semantic and structural patch features, generates
//! image-conditioned text prompts, scores every patch against the prompt
//! banks and mixes per-layer maps with learned gates. Everything is built
//! on a small reverse-mode differentiation engine in [`numcore`].

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hsvs;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod train;
pub mod vcpg;
pub mod verify;
pub mod vtam;

pub use config::{ArchConfig, FocalTarget, ModelConfig, Scoring, TrainConfig};
pub use data::{FeatureBundle, GridMap, Mask};
pub use error::{Error, Result};
pub use model::Model;
