//! Teacher-guided diffusion data synthesis and knowledge distillation at desk scale.
//!
//! The pipeline has two stages. Stage one synthesizes a labeled dataset by
//! sampling a small class-conditional diffusion model while editing the noisy
//! latents with gradients of an inversion loss derived from a frozen teacher
//! classifier (batch-norm statistic matching, class prior, adversarial
//! teacher/student disagreement), applying CutMix augmentation in latent space
//! every `k` denoising steps, and harvesting intermediate predicted-clean
//! images. Stage two distills a student classifier on the synthesized dataset
//! with a temperature-scaled KL loss plus a spatial class-activation-map
//! consistency loss.
//!
//! Everything runs in `f64` on the CPU with explicitly seeded RNG streams so
//! results are bit-reproducible across runs on one machine.

pub mod autograd;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthesis;

pub use error::{Error, Result};
