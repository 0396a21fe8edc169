//! Conditional noise-prediction U-Net.
//!
//! A three-level encoder/decoder over `[B,C,H,W]` latents with additive skip
//! connections, FiLM-style conditioning (a learned per-channel bias per
//! level, computed from the class embedding plus sinusoidal timestep
//! features) and a zero-initialized output head. The class vocabulary has one
//! extra trainable row for the null condition used by classifier-free
//! guidance.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::diffusion::LatentBatch;
use crate::error::{Error, Result};

use super::{timestep_features, Conv2d, Linear, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub resolution: usize,
    pub base_channels: usize,
    /// Number of class conditions plus the null slot.
    pub cond_vocab: usize,
    pub emb_dim: usize,
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "denoiser resolution must be divisible by 4, got {}",
                self.resolution
            )));
        }
        if self.cond_vocab < 2 {
            return Err(Error::Config(
                "denoiser needs at least one class condition plus the null slot".into(),
            ));
        }
        if self.emb_dim % 2 != 0 {
            return Err(Error::Config("embedding dim must be even".into()));
        }
        Ok(())
    }

    pub fn arch_tag(&self) -> String {
        format!(
            "cond-unet/{}x{}/b{}/v{}/e{}",
            self.in_channels, self.resolution, self.base_channels, self.cond_vocab, self.emb_dim
        )
    }
}

pub struct CondUnet {
    pub cfg: DenoiserConfig,
    pub seed: u64,
    class_emb: Param,
    cond_fc: Linear,
    enc: Conv2d,
    film_enc: Linear,
    down1: Conv2d,
    film_d1: Linear,
    down2: Conv2d,
    film_d2: Linear,
    mid: Conv2d,
    film_mid: Linear,
    up1: Conv2d,
    film_u1: Linear,
    up2: Conv2d,
    film_u2: Linear,
    out: Conv2d,
}

impl CondUnet {
    pub fn new(cfg: DenoiserConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let (c, e) = (cfg.base_channels, cfg.emb_dim);
        Ok(CondUnet {
            class_emb: Param::randn(&[cfg.cond_vocab, e], 0.2, &mut rng),
            cond_fc: Linear::new(e, e, &mut rng),
            enc: Conv2d::new(cfg.in_channels, c, 3, 1, 1, &mut rng),
            film_enc: Linear::new(e, c, &mut rng),
            down1: Conv2d::new(c, 2 * c, 3, 2, 1, &mut rng),
            film_d1: Linear::new(e, 2 * c, &mut rng),
            down2: Conv2d::new(2 * c, 3 * c, 3, 2, 1, &mut rng),
            film_d2: Linear::new(e, 3 * c, &mut rng),
            mid: Conv2d::new(3 * c, 3 * c, 3, 1, 1, &mut rng),
            film_mid: Linear::new(e, 3 * c, &mut rng),
            up1: Conv2d::new(3 * c, 2 * c, 3, 1, 1, &mut rng),
            film_u1: Linear::new(e, 2 * c, &mut rng),
            up2: Conv2d::new(2 * c, c, 3, 1, 1, &mut rng),
            film_u2: Linear::new(e, c, &mut rng),
            out: Conv2d::zero_init(c, cfg.in_channels, 3, 1, 1),
            cfg,
            seed,
        })
    }

    pub fn null_condition(&self) -> usize {
        self.cfg.cond_vocab - 1
    }

    pub fn condition_vocab(&self) -> usize {
        self.cfg.cond_vocab
    }

    fn check_conditions(&self, cond_ids: &[usize]) -> Result<()> {
        for &c in cond_ids {
            if c >= self.cfg.cond_vocab {
                return Err(Error::contract(
                    "denoise",
                    format!("unknown condition id {c}, vocab {}", self.cfg.cond_vocab),
                ));
            }
        }
        Ok(())
    }

    /// Predict noise for a latent tensor with per-item timesteps and
    /// condition ids. Differentiable w.r.t. `z` and all parameters.
    pub fn forward(
        &self,
        tape: &Tape,
        z: &Tensor,
        t_ids: &[usize],
        cond_ids: &[usize],
    ) -> Result<Tensor> {
        let b = z.shape()[0];
        if t_ids.len() != b || cond_ids.len() != b {
            return Err(Error::contract(
                "denoise",
                format!(
                    "batch {b} but {} timesteps / {} conditions",
                    t_ids.len(),
                    cond_ids.len()
                ),
            ));
        }
        self.check_conditions(cond_ids)?;
        let e = self.cfg.emb_dim;
        let mut tfeat = ndarray::Array2::zeros((b, e));
        for (i, &t) in t_ids.iter().enumerate() {
            tfeat.row_mut(i).assign(&timestep_features(t, e));
        }
        let temb = tape.leaf(tfeat.into_dyn());
        let cemb = self.class_emb.bind(tape).select_rows(cond_ids);
        let h = self.cond_fc.forward(tape, &cemb.add(&temb)).silu();

        let e0 = self
            .enc
            .forward(tape, z)
            .add_bc(&self.film_enc.forward(tape, &h))
            .silu();
        let d1 = self
            .down1
            .forward(tape, &e0)
            .add_bc(&self.film_d1.forward(tape, &h))
            .silu();
        let d2 = self
            .down2
            .forward(tape, &d1)
            .add_bc(&self.film_d2.forward(tape, &h))
            .silu();
        let m = self
            .mid
            .forward(tape, &d2)
            .add_bc(&self.film_mid.forward(tape, &h))
            .silu();
        let u1 = self
            .up1
            .forward(tape, &m.upsample_nearest_2x())
            .add_bc(&self.film_u1.forward(tape, &h))
            .silu()
            .add(&d1);
        let u2 = self
            .up2
            .forward(tape, &u1.upsample_nearest_2x())
            .add_bc(&self.film_u2.forward(tape, &h))
            .silu()
            .add(&e0);
        Ok(self.out.forward(tape, &u2))
    }

    /// Predict noise for a latent batch under one shared condition id.
    pub fn denoise(&self, z: &LatentBatch, condition: usize) -> Result<Array4<f64>> {
        self.denoise_per_item(z, &vec![condition; z.batch_size()])
    }

    /// Predict noise with a condition id per item.
    pub fn denoise_per_item(&self, z: &LatentBatch, cond_ids: &[usize]) -> Result<Array4<f64>> {
        let tape = Tape::new();
        let zt = tape.leaf(z.data.clone().into_dyn());
        let out = self.forward(&tape, &zt, &vec![z.timestep; z.batch_size()], cond_ids)?;
        Ok(out
            .data()
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap())
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.class_emb,
            &self.cond_fc.weight,
            &self.cond_fc.bias,
            &self.enc.weight,
            &self.enc.bias,
            &self.film_enc.weight,
            &self.film_enc.bias,
            &self.down1.weight,
            &self.down1.bias,
            &self.film_d1.weight,
            &self.film_d1.bias,
            &self.down2.weight,
            &self.down2.bias,
            &self.film_d2.weight,
            &self.film_d2.bias,
            &self.mid.weight,
            &self.mid.bias,
            &self.film_mid.weight,
            &self.film_mid.bias,
            &self.up1.weight,
            &self.up1.bias,
            &self.film_u1.weight,
            &self.film_u1.bias,
            &self.up2.weight,
            &self.up2.bias,
            &self.film_u2.weight,
            &self.film_u2.bias,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.class_emb,
            &mut self.cond_fc.weight,
            &mut self.cond_fc.bias,
            &mut self.enc.weight,
            &mut self.enc.bias,
            &mut self.film_enc.weight,
            &mut self.film_enc.bias,
            &mut self.down1.weight,
            &mut self.down1.bias,
            &mut self.film_d1.weight,
            &mut self.film_d1.bias,
            &mut self.down2.weight,
            &mut self.down2.bias,
            &mut self.film_d2.weight,
            &mut self.film_d2.bias,
            &mut self.mid.weight,
            &mut self.mid.bias,
            &mut self.film_mid.weight,
            &mut self.film_mid.bias,
            &mut self.up1.weight,
            &mut self.up1.bias,
            &mut self.film_u1.weight,
            &mut self.film_u1.bias,
            &mut self.up2.weight,
            &mut self.up2.bias,
            &mut self.film_u2.weight,
            &mut self.film_u2.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn param_names() -> Vec<&'static str> {
        vec![
            "class_emb",
            "cond_fc.weight",
            "cond_fc.bias",
            "enc.weight",
            "enc.bias",
            "film_enc.weight",
            "film_enc.bias",
            "down1.weight",
            "down1.bias",
            "film_d1.weight",
            "film_d1.bias",
            "down2.weight",
            "down2.bias",
            "film_d2.weight",
            "film_d2.bias",
            "mid.weight",
            "mid.bias",
            "film_mid.weight",
            "film_mid.bias",
            "up1.weight",
            "up1.bias",
            "film_u1.weight",
            "film_u1.bias",
            "up2.weight",
            "up2.bias",
            "film_u2.weight",
            "film_u2.bias",
            "out.weight",
            "out.bias",
        ]
    }

    pub fn param_checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> super::checkpoint::Checkpoint {
        let mut ckpt = super::checkpoint::Checkpoint::new(
            "denoiser",
            &self.cfg.arch_tag(),
            config_hash,
            self.seed,
        );
        ckpt.meta.insert(
            "denoiser_config".into(),
            serde_json::to_value(&self.cfg).unwrap(),
        );
        for (name, p) in Self::param_names().into_iter().zip(self.params()) {
            ckpt.put(name, p.data());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &super::checkpoint::Checkpoint) -> Result<Self> {
        ckpt.expect_kind("denoiser")?;
        let cfg: DenoiserConfig = serde_json::from_value(
            ckpt.meta
                .get("denoiser_config")
                .ok_or_else(|| Error::Checkpoint("missing denoiser_config".into()))?
                .clone(),
        )?;
        if cfg.arch_tag() != ckpt.arch {
            return Err(Error::Checkpoint(format!(
                "arch tag mismatch: {} vs {}",
                cfg.arch_tag(),
                ckpt.arch
            )));
        }
        let mut net = CondUnet::new(cfg, ckpt.seed)?;
        for (name, p) in Self::param_names().into_iter().zip(net.params_mut()) {
            *p.data_mut() = ckpt.take(name)?;
        }
        Ok(net)
    }
}
