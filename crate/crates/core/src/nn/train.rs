//! Optimizer and training loops for the desk-scale networks.
//!
//! All loops draw from explicitly seeded streams and run single-threaded, so
//! a fixed seed gives bit-identical final parameters and metrics.

use ndarray::{Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::ImageDataset;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

use super::classifier::CnnClassifier;
use super::codec::{Codec, ConvAutoencoder};
use super::denoiser::CondUnet;
use super::{randn_shape, Param};

/// Adam with bias correction; state is positional, so the caller must pass
/// parameters in a stable order.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[&Param]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect(),
            v: params.iter().map(|p| ArrayD::zeros(p.data().raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Param>, grads: &[ArrayD<f64>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param count mismatch");
        assert_eq!(params.len(), grads.len(), "grad/param count mismatch");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(m.view_mut()).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(v.view_mut()).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let data = p.data_mut();
            ndarray::Zip::from(data.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
                });
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervisedTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out accuracy the model must reach, else training fails loudly.
    pub accuracy_floor: f64,
    /// Epochs without loss improvement before declaring divergence.
    pub divergence_patience: usize,
}

impl Default for SupervisedTrainConfig {
    fn default() -> Self {
        SupervisedTrainConfig {
            epochs: 30,
            batch_size: 32,
            lr: 3e-3,
            accuracy_floor: 0.95,
            divergence_patience: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetric {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub eval_accuracy: Option<f64>,
}

/// Eval-mode top-1 accuracy, chunked to bound graph size.
pub fn accuracy(net: &CnnClassifier, ds: &ImageDataset) -> f64 {
    if ds.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    let mut done = 0usize;
    while done < ds.len() {
        let hi = (done + 256).min(ds.len());
        let idx: Vec<usize> = (done..hi).collect();
        let (images, labels) = ds.batch(&idx);
        let preds = net.predict(&images);
        correct += preds
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
        done = hi;
    }
    correct as f64 / ds.len() as f64
}

/// Supervised cross-entropy training for a classifier (teacher pre-training
/// and baseline students).
pub fn train_classifier(
    net: &mut CnnClassifier,
    train: &ImageDataset,
    eval: Option<&ImageDataset>,
    cfg: &SupervisedTrainConfig,
    seed: u64,
) -> Result<Vec<EpochMetric>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if train.num_classes != net.cfg.num_classes {
        return Err(Error::ClassSpaceMismatch(format!(
            "dataset has {} classes, classifier {}",
            train.num_classes, net.cfg.num_classes
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut adam = Adam::new(cfg.lr, &net.params());
    let mut curve = Vec::new();
    let mut best_loss = f64::INFINITY;
    let mut stale = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = train.batch(chunk);
            let tape = Tape::new();
            let x = tape.leaf(images.into_dyn());
            let out = net.forward_train(&tape, &x);
            let loss = out.logits.log_softmax2d().nll(&labels);
            let grads = loss.backward();
            let gvec: Vec<ArrayD<f64>> = net.params().iter().map(|p| p.grad(&grads)).collect();
            adam.step(net.params_mut(), &gvec);
            loss_sum += loss.item();
            batches += 1;
        }
        let epoch_loss = loss_sum / batches as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite loss at epoch {epoch}"
            )));
        }
        let train_accuracy = accuracy(net, train);
        let eval_accuracy = eval.map(|ds| accuracy(net, ds));
        curve.push(EpochMetric {
            epoch,
            loss: epoch_loss,
            train_accuracy,
            eval_accuracy,
        });
        if epoch_loss + 1e-12 < best_loss {
            best_loss = epoch_loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.divergence_patience {
                let tail: Vec<String> = curve
                    .iter()
                    .rev()
                    .take(cfg.divergence_patience)
                    .map(|m| format!("epoch {} loss {:.6}", m.epoch, m.loss))
                    .collect();
                return Err(Error::Divergence(format!(
                    "loss stagnant for {} epochs; tail: [{}]",
                    cfg.divergence_patience,
                    tail.join(", ")
                )));
            }
        }
    }
    let reached = curve
        .last()
        .and_then(|m| m.eval_accuracy)
        .unwrap_or_else(|| curve.last().map(|m| m.train_accuracy).unwrap_or(0.0));
    if reached < cfg.accuracy_floor {
        return Err(Error::AccuracyFloor {
            got: reached,
            floor: cfg.accuracy_floor,
        });
    }
    Ok(curve)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenoiserTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of replacing the class condition with the null id.
    pub p_uncond: f64,
    /// Loss-improvement patience in windows of `window` steps.
    pub divergence_patience: usize,
    pub window: usize,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            steps: 3000,
            batch_size: 32,
            lr: 2e-3,
            p_uncond: 0.15,
            divergence_patience: 20,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
}

/// Noise-prediction training with classifier-free condition dropout.
pub fn train_denoiser(
    net: &mut CondUnet,
    corpus: &ImageDataset,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    seed: u64,
) -> Result<Vec<StepMetric>> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("denoiser corpus is empty".into()));
    }
    let null_id = net.null_condition();
    if corpus.num_classes > null_id {
        return Err(Error::ClassSpaceMismatch(format!(
            "corpus has {} classes but denoiser vocab holds {} plus null",
            corpus.num_classes,
            null_id
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut adam = Adam::new(cfg.lr, &net.params());
    let mut curve = Vec::new();
    let t_max = schedule.num_steps();
    let mut window_sum = 0.0;
    let mut best_window = f64::INFINITY;
    let mut stale = 0usize;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(0..corpus.len()))
            .collect();
        let (x0, labels) = corpus.batch(&idx);
        let conds: Vec<usize> = labels
            .iter()
            .map(|&y| if rng.gen_bool(cfg.p_uncond) { null_id } else { y })
            .collect();
        let t_ids: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.gen_range(1..=t_max))
            .collect();
        let eps = randn_shape(x0.shape(), &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let mut zt = Array4::zeros(x0.raw_dim());
        for (b, &t) in t_ids.iter().enumerate() {
            let a = schedule.alpha_bar(t);
            let x0b = x0.index_axis(ndarray::Axis(0), b);
            let eb = eps.index_axis(ndarray::Axis(0), b);
            let mut zb = zt.index_axis_mut(ndarray::Axis(0), b);
            zb.assign(&x0b);
            zb.mapv_inplace(|v| v * a.sqrt());
            ndarray::Zip::from(&mut zb).and(&eb).for_each(|z, &e| {
                *z += (1.0 - a).sqrt() * e;
            });
        }
        let tape = Tape::new();
        let zt_t = tape.leaf(zt.into_dyn());
        let target = tape.leaf(eps.into_dyn());
        let pred = net.forward(&tape, &zt_t, &t_ids, &conds)?;
        let loss = pred.sub(&target).square().mean_all();
        let grads = loss.backward();
        let gvec: Vec<ArrayD<f64>> = net.params().iter().map(|p| p.grad(&grads)).collect();
        adam.step(net.params_mut(), &gvec);
        let loss_v = loss.item();
        if !loss_v.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite denoiser loss at step {step}"
            )));
        }
        curve.push(StepMetric { step, loss: loss_v });
        window_sum += loss_v;
        if (step + 1) % cfg.window == 0 {
            let mean = window_sum / cfg.window as f64;
            window_sum = 0.0;
            if mean + 1e-9 < best_window {
                best_window = mean;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.divergence_patience {
                    return Err(Error::Divergence(format!(
                        "denoiser loss stagnant for {} windows (best {:.6}, last {:.6})",
                        cfg.divergence_patience, best_window, mean
                    )));
                }
            }
        }
    }
    Ok(curve)
}

/// Reconstruction training for the optional autoencoder codec.
pub fn train_codec(
    ae: &mut ConvAutoencoder,
    corpus: &ImageDataset,
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<StepMetric>> {
    if corpus.is_empty() {
        return Err(Error::EmptyDataset("codec corpus is empty".into()));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut adam = Adam::new(lr, &ae.params());
    let mut curve = Vec::new();
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch_size)
            .map(|_| rng.gen_range(0..corpus.len()))
            .collect();
        let (x0, _) = corpus.batch(&idx);
        let tape = Tape::new();
        let x = tape.leaf(x0.into_dyn());
        let z = ae.encode_t(&tape, &x);
        let rec = ae.decode_t(&tape, &z);
        let loss = rec.sub(&x).square().mean_all();
        let grads = loss.backward();
        let gvec: Vec<ArrayD<f64>> = ae.params().iter().map(|p| p.grad(&grads)).collect();
        adam.step(ae.params_mut(), &gvec);
        curve.push(StepMetric {
            step,
            loss: loss.item(),
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, teacher_domain};
    use crate::nn::classifier::ClassifierConfig;

    fn tiny_classifier(num_classes: usize, seed: u64) -> CnnClassifier {
        CnnClassifier::new(
            ClassifierConfig {
                in_channels: 1,
                resolution: 16,
                widths: vec![4, 6, 8, 10],
                num_classes,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let mut p = Param::new(ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut adam = Adam::new(0.1, &[&p]);
        for _ in 0..300 {
            let tape = Tape::new();
            let x = p.bind(&tape);
            let loss = x.square().sum_all();
            let grads = loss.backward();
            let g = p.grad(&grads);
            adam.step(vec![&mut p], &[g]);
        }
        assert!(p.data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn empty_dataset_is_an_immediate_config_error() {
        let mut net = tiny_classifier(2, 1);
        let empty = ImageDataset {
            images: Array4::zeros((0, 1, 16, 16)),
            labels: vec![],
            num_classes: 2,
        };
        let err = train_classifier(
            &mut net,
            &empty,
            None,
            &SupervisedTrainConfig::default(),
            1,
        );
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn teacher_reaches_floor_on_two_class_toy_set() {
        // 2 classes x 100 train images, held-out split; floor 0.95.
        let train = generate_dataset(&[0, 1], 100, 16, &teacher_domain(), 11).unwrap();
        let eval = generate_dataset(&[0, 1], 50, 16, &teacher_domain(), 12).unwrap();
        let mut net = tiny_classifier(2, 2);
        let cfg = SupervisedTrainConfig {
            epochs: 12,
            ..Default::default()
        };
        let curve = train_classifier(&mut net, &train, Some(&eval), &cfg, 3).unwrap();
        let last = curve.last().unwrap();
        assert!(last.eval_accuracy.unwrap() >= 0.95);
    }

    #[test]
    fn training_is_bit_reproducible() {
        let train = generate_dataset(&[0, 1], 20, 16, &teacher_domain(), 21).unwrap();
        let cfg = SupervisedTrainConfig {
            epochs: 3,
            accuracy_floor: 0.0,
            ..Default::default()
        };
        let mut a = tiny_classifier(2, 5);
        let curve_a = train_classifier(&mut a, &train, None, &cfg, 7).unwrap();
        let mut b = tiny_classifier(2, 5);
        let curve_b = train_classifier(&mut b, &train, None, &cfg, 7).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        for (ma, mb) in curve_a.iter().zip(&curve_b) {
            assert_eq!(ma.loss.to_bits(), mb.loss.to_bits());
            assert_eq!(ma.train_accuracy.to_bits(), mb.train_accuracy.to_bits());
        }
    }

    #[test]
    fn divergence_detection_fires_on_zero_lr() {
        let train = generate_dataset(&[0, 1], 10, 16, &teacher_domain(), 31).unwrap();
        let mut net = tiny_classifier(2, 6);
        let cfg = SupervisedTrainConfig {
            epochs: 30,
            lr: 0.0,
            accuracy_floor: 0.0,
            divergence_patience: 3,
            ..Default::default()
        };
        assert!(matches!(
            train_classifier(&mut net, &train, None, &cfg, 8),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn denoiser_loss_decreases() {
        let corpus = crate::data::generate_roster_corpus(6, 16, &teacher_domain(), 41).unwrap();
        let mut net = CondUnet::new(
            crate::nn::DenoiserConfig {
                in_channels: 1,
                resolution: 16,
                base_channels: 6,
                cond_vocab: crate::data::ROSTER_SIZE + 1,
                emb_dim: 16,
            },
            42,
        )
        .unwrap();
        let schedule = NoiseSchedule::cosine(10).unwrap();
        let cfg = DenoiserTrainConfig {
            steps: 120,
            batch_size: 8,
            ..Default::default()
        };
        let curve = train_denoiser(&mut net, &corpus, &schedule, &cfg, 43).unwrap();
        let head: f64 = curve[..20].iter().map(|m| m.loss).sum::<f64>() / 20.0;
        let tail: f64 = curve[curve.len() - 20..].iter().map(|m| m.loss).sum::<f64>() / 20.0;
        assert!(
            tail < head,
            "denoiser loss should fall: head {head:.4}, tail {tail:.4}"
        );
    }

    #[test]
    fn codec_training_bounds_reconstruction_error() {
        let corpus = generate_dataset(&[0, 1], 20, 16, &teacher_domain(), 51).unwrap();
        let mut ae = ConvAutoencoder::new(1, 2, 8, 52);
        train_codec(&mut ae, &corpus, 400, 16, 2e-3, 53).unwrap();
        let x = corpus.images.clone();
        let rec = ae.decode(&ae.encode(&x));
        let mse = (&rec - &x).mapv(|v| v * v).mean().unwrap();
        assert!(mse < 0.03, "autoencoder reconstruction mse {mse:.4}");
    }
}
