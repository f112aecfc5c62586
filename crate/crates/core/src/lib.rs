//! Two-stage alternating 3D portrait stylization: artistic inversion and
//! paired fine-tuning, followed by threshold-gated image-text fusion in a
//! joint embedding space.

pub mod backends;
pub mod config;
pub mod container;
pub mod embedding;
pub mod error;
pub mod fusion;
pub mod image;
pub mod inversion;
pub mod latent;
pub mod metrics;
pub mod optim;
pub mod pose;
pub mod rng;
pub mod stylizer;
pub mod trainer;

pub use error::{Error, Result, Stage};
