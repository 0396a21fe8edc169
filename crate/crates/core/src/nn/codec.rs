//! Pluggable latent codec.
//!
//! The default [`IdentityCodec`] makes latent space equal to pixel space, so
//! gradients from the inversion loss reach the latent through a short path.
//! [`ConvAutoencoder`] is an optional trained drop-in with a spatially
//! downsampled latent.

use ndarray::Array4;

use crate::autograd::{Tape, Tensor};
use crate::error::Result;

use super::{Conv2d, Param};

pub trait Codec {
    fn name(&self) -> &'static str;
    /// Image -> latent, differentiable.
    fn encode_t(&self, tape: &Tape, x: &Tensor) -> Tensor;
    /// Latent -> image, differentiable.
    fn decode_t(&self, tape: &Tape, z: &Tensor) -> Tensor;
    /// Latent shape `[C,H,W]` for an image shape `[C,H,W]`.
    fn latent_shape(&self, image_shape: [usize; 3]) -> [usize; 3];

    fn encode(&self, x: &Array4<f64>) -> Array4<f64> {
        let tape = Tape::new();
        let xt = tape.leaf(x.clone().into_dyn());
        self.encode_t(&tape, &xt)
            .data()
            .clone()
            .into_dimensionality()
            .unwrap()
    }

    fn decode(&self, z: &Array4<f64>) -> Array4<f64> {
        let tape = Tape::new();
        let zt = tape.leaf(z.clone().into_dyn());
        self.decode_t(&tape, &zt)
            .data()
            .clone()
            .into_dimensionality()
            .unwrap()
    }
}

/// Exact pass-through: latent space is pixel space.
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn encode_t(&self, _tape: &Tape, x: &Tensor) -> Tensor {
        x.clone()
    }

    fn decode_t(&self, _tape: &Tape, z: &Tensor) -> Tensor {
        z.clone()
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> [usize; 3] {
        image_shape
    }
}

/// Small convolutional autoencoder with a 2x-downsampled latent.
pub struct ConvAutoencoder {
    pub image_channels: usize,
    pub latent_channels: usize,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
    pub seed: u64,
}

impl ConvAutoencoder {
    pub fn new(image_channels: usize, latent_channels: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = crate::rng::seeded(seed);
        ConvAutoencoder {
            image_channels,
            latent_channels,
            enc1: Conv2d::new(image_channels, hidden, 3, 2, 1, &mut rng),
            enc2: Conv2d::new(hidden, latent_channels, 3, 1, 1, &mut rng),
            dec1: Conv2d::new(latent_channels, hidden, 3, 1, 1, &mut rng),
            dec2: Conv2d::new(hidden, image_channels, 3, 1, 1, &mut rng),
            seed,
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![
            &self.enc1.weight,
            &self.enc1.bias,
            &self.enc2.weight,
            &self.enc2.bias,
            &self.dec1.weight,
            &self.dec1.bias,
            &self.dec2.weight,
            &self.dec2.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.enc1.weight,
            &mut self.enc1.bias,
            &mut self.enc2.weight,
            &mut self.enc2.bias,
            &mut self.dec1.weight,
            &mut self.dec1.bias,
            &mut self.dec2.weight,
            &mut self.dec2.bias,
        ]
    }

    fn param_names() -> Vec<&'static str> {
        vec![
            "enc1.weight",
            "enc1.bias",
            "enc2.weight",
            "enc2.bias",
            "dec1.weight",
            "dec1.bias",
            "dec2.weight",
            "dec2.bias",
        ]
    }

    pub fn arch_tag(&self) -> String {
        format!("conv-ae/{}to{}", self.image_channels, self.latent_channels)
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> super::checkpoint::Checkpoint {
        let mut ckpt = super::checkpoint::Checkpoint::new(
            "codec",
            &self.arch_tag(),
            config_hash,
            self.seed,
        );
        ckpt.meta.insert(
            "hidden".into(),
            serde_json::json!(self.enc1.weight.data().shape()[0]),
        );
        for (name, p) in Self::param_names().into_iter().zip(self.params()) {
            ckpt.put(name, p.data());
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &super::checkpoint::Checkpoint) -> Result<Self> {
        ckpt.expect_kind("codec")?;
        let hidden = ckpt
            .meta
            .get("hidden")
            .and_then(|v| v.as_u64())
            .unwrap_or(8) as usize;
        let enc1 = ckpt.take("enc1.weight")?;
        let (latent_channels, image_channels) =
            (ckpt.take("enc2.weight")?.shape()[0], enc1.shape()[1]);
        let mut ae = ConvAutoencoder::new(image_channels, latent_channels, hidden, ckpt.seed);
        for (name, p) in Self::param_names().into_iter().zip(ae.params_mut()) {
            *p.data_mut() = ckpt.take(name)?;
        }
        Ok(ae)
    }
}

impl Codec for ConvAutoencoder {
    fn name(&self) -> &'static str {
        "autoencoder"
    }

    fn encode_t(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let h = self.enc1.forward(tape, x).silu();
        self.enc2.forward(tape, &h)
    }

    fn decode_t(&self, tape: &Tape, z: &Tensor) -> Tensor {
        let h = self.dec1.forward(tape, z).silu().upsample_nearest_2x();
        self.dec2.forward(tape, &h)
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> [usize; 3] {
        [
            self.latent_channels,
            image_shape[1] / 2,
            image_shape[2] / 2,
        ]
    }
}

/// Codec selected by the run config.
pub enum AnyCodec {
    Identity(IdentityCodec),
    Autoencoder(ConvAutoencoder),
}

impl Codec for AnyCodec {
    fn name(&self) -> &'static str {
        match self {
            AnyCodec::Identity(c) => c.name(),
            AnyCodec::Autoencoder(c) => c.name(),
        }
    }

    fn encode_t(&self, tape: &Tape, x: &Tensor) -> Tensor {
        match self {
            AnyCodec::Identity(c) => c.encode_t(tape, x),
            AnyCodec::Autoencoder(c) => c.encode_t(tape, x),
        }
    }

    fn decode_t(&self, tape: &Tape, z: &Tensor) -> Tensor {
        match self {
            AnyCodec::Identity(c) => c.decode_t(tape, z),
            AnyCodec::Autoencoder(c) => c.decode_t(tape, z),
        }
    }

    fn latent_shape(&self, image_shape: [usize; 3]) -> [usize; 3] {
        match self {
            AnyCodec::Identity(c) => c.latent_shape(image_shape),
            AnyCodec::Autoencoder(c) => c.latent_shape(image_shape),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_shape;

    #[test]
    fn identity_codec_is_bit_exact() {
        let mut rng = crate::rng::seeded(1);
        let x = uniform_shape(&[2, 1, 8, 8], 0.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let codec = IdentityCodec;
        assert_eq!(codec.decode(&codec.encode(&x)), x);
    }

    #[test]
    fn autoencoder_shapes() {
        let ae = ConvAutoencoder::new(1, 2, 6, 3);
        assert_eq!(ae.latent_shape([1, 16, 16]), [2, 8, 8]);
        let mut rng = crate::rng::seeded(4);
        let x = uniform_shape(&[2, 1, 16, 16], 0.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let z = ae.encode(&x);
        assert_eq!(z.shape(), &[2, 2, 8, 8]);
        assert_eq!(ae.decode(&z).shape(), x.shape());
    }
}
