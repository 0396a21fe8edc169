//! Toy-scale trainable networks: a conditional denoiser, teacher/student
//! classifiers instrumented for batch-norm statistics, intermediate feature
//! taps and classifier-head weights, plus a pluggable latent codec.
//!
//! Parameters live outside the autodiff tape in [`Param`] cells and are
//! re-bound as leaves on each forward pass; binding is cached per tape so a
//! parameter used by several sub-graphs (e.g. the conditional and
//! unconditional denoiser passes of one guidance step) accumulates a single
//! gradient.

pub mod checkpoint;
pub mod classifier;
pub mod codec;
pub mod denoiser;
pub mod train;

use std::cell::RefCell;

use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Conv2dSpec, Gradients, Tape, Tensor};

pub use classifier::{BnLayerStats, ClassifierConfig, ClassifierOutput, CnnClassifier};
pub use codec::{AnyCodec, Codec, ConvAutoencoder, IdentityCodec};
pub use denoiser::{CondUnet, DenoiserConfig};

/// A trainable array with a per-tape binding cache.
pub struct Param {
    data: ArrayD<f64>,
    bound: RefCell<Option<Tensor>>,
}

impl Param {
    pub fn new(data: ArrayD<f64>) -> Self {
        Param {
            data,
            bound: RefCell::new(None),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Self {
        Self::new(ArrayD::from_shape_fn(IxDyn(shape), |_| {
            std * rng.sample::<f64, _>(StandardNormal)
        }))
    }

    pub fn data(&self) -> &ArrayD<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut ArrayD<f64> {
        self.bound.replace(None);
        &mut self.data
    }

    /// Enter the parameter into a graph, reusing the binding if this tape
    /// already holds one.
    pub fn bind(&self, tape: &Tape) -> Tensor {
        if let Some(t) = self.bound.borrow().as_ref() {
            if tape.is_same(t.tape()) {
                return t.clone();
            }
        }
        let t = tape.leaf(self.data.clone());
        *self.bound.borrow_mut() = Some(t.clone());
        t
    }

    /// Gradient from the most recent backward pass, zeros if unused.
    pub fn grad(&self, grads: &Gradients) -> ArrayD<f64> {
        match self.bound.borrow().as_ref() {
            Some(t) => grads.wrt(t),
            None => ArrayD::zeros(self.data.raw_dim()),
        }
    }
}

/// 2-D convolution layer.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-initialized conv with square kernel.
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
        Conv2d {
            weight: Param::randn(&[cout, cin, kernel, kernel], std, rng),
            bias: Param::zeros(&[cout]),
            spec: Conv2dSpec::new(stride, pad),
        }
    }

    /// All-zero weights and bias (standard for a denoiser output head).
    pub fn zero_init(cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2d {
            weight: Param::zeros(&[cout, cin, kernel, kernel]),
            bias: Param::zeros(&[cout]),
            spec: Conv2dSpec::new(stride, pad),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight.bind(tape), Some(&self.bias.bind(tape)), self.spec)
    }
}

/// Fully connected layer storing its weight as `[out, in]`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha12Rng) -> Self {
        let std = (1.0 / input as f64).sqrt();
        Linear {
            weight: Param::randn(&[output, input], std, rng),
            bias: Param::zeros(&[output]),
        }
    }

    /// `x [B,in] -> [B,out]`.
    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Tensor {
        x.matmul(&self.weight.bind(tape).transpose2d())
            .add_rowvec(&self.bias.bind(tape))
    }
}

/// Batch normalization over `[B,C,H,W]` with biased batch variance for both
/// normalization and the running-average updates, so extracted batch
/// statistics and stored running statistics share one convention.
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

/// Floor applied to extracted batch variances before they reach any loss
/// that divides by them.
pub const VARIANCE_FLOOR: f64 = 1e-5;

/// Differentiable per-channel batch statistics of a pre-BN activation.
pub struct BnBatchStats {
    pub mean: Tensor,
    /// Biased variance, floored at [`VARIANCE_FLOOR`].
    pub var: Tensor,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(ArrayD::ones(IxDyn(&[channels]))),
            beta: Param::zeros(&[channels]),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    fn batch_stats(x: &Tensor) -> BnBatchStats {
        let mean = x.mean_bhw();
        let centered = x.add_c(&mean.neg());
        let var = centered.square().mean_bhw().clamp_min(VARIANCE_FLOOR);
        BnBatchStats { mean, var }
    }

    /// Eval-mode forward: normalize with running statistics. Also returns the
    /// (differentiable) batch statistics of the input for inversion losses.
    pub fn forward_eval(&self, tape: &Tape, x: &Tensor) -> (Tensor, BnBatchStats) {
        let stats = Self::batch_stats(x);
        let inv_std = tape.leaf(
            self.running_var
                .mapv(|v| 1.0 / (v + self.eps).sqrt())
                .into_dyn(),
        );
        let neg_mean = tape.leaf(self.running_mean.mapv(|v| -v).into_dyn());
        let scale = self.gamma.bind(tape).mul(&inv_std);
        let y = x.add_c(&neg_mean).mul_c(&scale).add_c(&self.beta.bind(tape));
        (y, stats)
    }

    /// Train-mode forward: normalize with batch statistics and update the
    /// running averages in place.
    pub fn forward_train(&mut self, tape: &Tape, x: &Tensor) -> Tensor {
        let mean = x.mean_bhw();
        let var = x.add_c(&mean.neg()).square().mean_bhw();
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean.data()[[c]];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var.data()[[c]];
        }
        self.normalize_with_batch_stats(tape, x)
    }

    /// Batch-statistic normalization without mutating the running averages
    /// (frozen networks consuming out-of-domain batches).
    pub fn forward_batch_stats(&self, tape: &Tape, x: &Tensor) -> Tensor {
        self.normalize_with_batch_stats(tape, x)
    }

    fn normalize_with_batch_stats(&self, tape: &Tape, x: &Tensor) -> Tensor {
        let mean = x.mean_bhw();
        let centered = x.add_c(&mean.neg());
        let var = centered.square().mean_bhw();
        let inv_std = var.add_scalar(self.eps).sqrt().recip();
        centered
            .mul_c(&self.gamma.bind(tape).mul(&inv_std))
            .add_c(&self.beta.bind(tape))
    }
}

/// Sinusoidal position features for an integer timestep.
pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    let mut v = Array1::zeros(dim);
    let half = dim / 2;
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        v[2 * i] = (t as f64 * freq).sin();
        v[2 * i + 1] = (t as f64 * freq).cos();
    }
    v
}

/// Standard-normal array sampled from a seeded stream.
pub fn randn_shape(shape: &[usize], rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Uniform array in `[lo, hi)`.
pub fn uniform_shape(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(lo..hi))
}
