//! Small CNN classifiers with batch norm, three downsampling stages and a
//! linear head. Teacher and student share the topology and differ in widths;
//! each downsampling stage exposes a feature tap, so stage `k` of any two
//! instances started from the same resolution pairs at equal spatial size.

use ndarray::{Array1, Array2, Array4, ArrayD};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Tape, Tensor};
use crate::error::{Error, Result};

use super::{BatchNorm2d, BnBatchStats, Conv2d, Linear, Param};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub resolution: usize,
    /// Channel widths: `[stem, stage1, stage2, stage3]`.
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != 4 {
            return Err(Error::Config(format!(
                "classifier widths must have 4 entries, got {}",
                self.widths.len()
            )));
        }
        if self.resolution < 4 || self.resolution % 4 != 0 {
            return Err(Error::Config(format!(
                "classifier resolution must be a multiple of 4 (>= 4), got {}",
                self.resolution
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        Ok(())
    }

    pub fn arch_tag(&self) -> String {
        format!(
            "cnn-bn/{}x{}/{}/c{}",
            self.in_channels,
            self.resolution,
            self.widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join("-"),
            self.num_classes
        )
    }
}

/// Read-only snapshot of one batch-norm layer's running statistics.
#[derive(Debug, Clone)]
pub struct BnLayerStats {
    pub layer_id: usize,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// One forward pass: logits, differentiable pre-BN batch statistics per BN
/// layer (in network order) and the three stage feature taps.
pub struct ClassifierOutput {
    pub logits: Tensor,
    pub bn_stats: Vec<BnBatchStats>,
    pub taps: Vec<Tensor>,
}

pub struct CnnClassifier {
    pub cfg: ClassifierConfig,
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stage_convs: Vec<Conv2d>,
    stage_bns: Vec<BatchNorm2d>,
    head: Linear,
    pub seed: u64,
}

impl CnnClassifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let stem = Conv2d::new(cfg.in_channels, cfg.widths[0], 3, 1, 1, &mut rng);
        let stem_bn = BatchNorm2d::new(cfg.widths[0]);
        let mut stage_convs = Vec::new();
        let mut stage_bns = Vec::new();
        for k in 0..3 {
            stage_convs.push(Conv2d::new(cfg.widths[k], cfg.widths[k + 1], 3, 2, 1, &mut rng));
            stage_bns.push(BatchNorm2d::new(cfg.widths[k + 1]));
        }
        let head = Linear::new(cfg.widths[3], cfg.num_classes, &mut rng);
        Ok(CnnClassifier {
            cfg,
            stem,
            stem_bn,
            stage_convs,
            stage_bns,
            head,
            seed,
        })
    }

    pub fn num_taps(&self) -> usize {
        self.stage_convs.len()
    }

    /// Spatial side length of tap `k` (stride-2 stages halve, rounding up).
    pub fn tap_resolution(&self, k: usize) -> usize {
        let mut r = self.cfg.resolution;
        for _ in 0..=k {
            r = r.div_ceil(2);
        }
        r
    }

    pub fn tap_channels(&self, k: usize) -> usize {
        self.cfg.widths[k + 1]
    }

    /// Eval-mode forward: batch norm uses running statistics.
    pub fn forward(&self, tape: &Tape, images: &Tensor) -> ClassifierOutput {
        let mut bn_stats = Vec::new();
        let mut taps = Vec::new();
        let pre = self.stem.forward(tape, images);
        let (y, s) = self.stem_bn.forward_eval(tape, &pre);
        bn_stats.push(s);
        let mut h = y.relu();
        for (conv, bn) in self.stage_convs.iter().zip(&self.stage_bns) {
            let pre = conv.forward(tape, &h);
            let (y, s) = bn.forward_eval(tape, &pre);
            bn_stats.push(s);
            h = y.relu();
            taps.push(h.clone());
        }
        let pooled = h.global_avg_pool();
        let logits = self.head.forward(tape, &pooled);
        ClassifierOutput {
            logits,
            bn_stats,
            taps,
        }
    }

    /// Train-mode forward: batch norm normalizes with batch statistics and
    /// updates running averages. Single-writer: requires `&mut self`.
    pub fn forward_train(&mut self, tape: &Tape, images: &Tensor) -> ClassifierOutput {
        let mut taps = Vec::new();
        let pre = self.stem.forward(tape, images);
        let mut h = self.stem_bn.forward_train(tape, &pre).relu();
        for (conv, bn) in self.stage_convs.iter().zip(self.stage_bns.iter_mut()) {
            let pre = conv.forward(tape, &h);
            h = bn.forward_train(tape, &pre).relu();
            taps.push(h.clone());
        }
        let pooled = h.global_avg_pool();
        let logits = self.head.forward(tape, &pooled);
        ClassifierOutput {
            logits,
            bn_stats: Vec::new(),
            taps,
        }
    }

    /// Batch-statistic normalization without touching the running averages,
    /// for a frozen network consuming batches far from its training domain.
    pub fn forward_with_batch_stats(&self, tape: &Tape, images: &Tensor) -> ClassifierOutput {
        let mut taps = Vec::new();
        let pre = self.stem.forward(tape, images);
        let mut h = self.stem_bn.forward_batch_stats(tape, &pre).relu();
        for (conv, bn) in self.stage_convs.iter().zip(&self.stage_bns) {
            let pre = conv.forward(tape, &h);
            h = bn.forward_batch_stats(tape, &pre).relu();
            taps.push(h.clone());
        }
        let pooled = h.global_avg_pool();
        let logits = self.head.forward(tape, &pooled);
        ClassifierOutput {
            logits,
            bn_stats: Vec::new(),
            taps,
        }
    }

    /// Per-layer batch statistics of the pre-BN activations for `images`.
    pub fn extract_batch_stats(&self, tape: &Tape, images: &Tensor) -> Vec<BnBatchStats> {
        self.forward(tape, images).bn_stats
    }

    /// Eval-mode logits for raw image data.
    pub fn logits(&self, images: &Array4<f64>) -> Array2<f64> {
        let tape = Tape::new();
        let x = tape.leaf(images.clone().into_dyn());
        let out = self.forward(&tape, &x);
        out.logits
            .data()
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned()
    }

    /// Argmax class prediction per item.
    pub fn predict(&self, images: &Array4<f64>) -> Vec<usize> {
        let logits = self.logits(images);
        logits
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }

    /// Running statistics of every BN layer, in network order.
    pub fn bn_layers(&self) -> Vec<BnLayerStats> {
        let mut out = vec![BnLayerStats {
            layer_id: 0,
            running_mean: self.stem_bn.running_mean.clone(),
            running_var: self.stem_bn.running_var.clone(),
        }];
        for (k, bn) in self.stage_bns.iter().enumerate() {
            out.push(BnLayerStats {
                layer_id: k + 1,
                running_mean: bn.running_mean.clone(),
                running_var: bn.running_var.clone(),
            });
        }
        out
    }

    /// Classifier head weights, `[num_classes, final_channels]`.
    pub fn head_weights(&self) -> &ArrayD<f64> {
        self.head.weight.data()
    }

    pub fn head_weight_param(&self) -> &Param {
        &self.head.weight
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![
            &self.stem.weight,
            &self.stem.bias,
            &self.stem_bn.gamma,
            &self.stem_bn.beta,
        ];
        for (conv, bn) in self.stage_convs.iter().zip(&self.stage_bns) {
            p.extend([&conv.weight, &conv.bias, &bn.gamma, &bn.beta]);
        }
        p.extend([&self.head.weight, &self.head.bias]);
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![
            &mut self.stem.weight,
            &mut self.stem.bias,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for (conv, bn) in self.stage_convs.iter_mut().zip(self.stage_bns.iter_mut()) {
            p.extend([&mut conv.weight, &mut conv.bias, &mut bn.gamma, &mut bn.beta]);
        }
        p.extend([&mut self.head.weight, &mut self.head.bias]);
        p
    }

    /// Stable names matching `params()` order.
    fn param_names(&self) -> Vec<String> {
        let mut names = vec![
            "stem.weight".into(),
            "stem.bias".into(),
            "bn0.gamma".into(),
            "bn0.beta".into(),
        ];
        for k in 0..self.stage_convs.len() {
            names.push(format!("stage{k}.weight"));
            names.push(format!("stage{k}.bias"));
            names.push(format!("bn{}.gamma", k + 1));
            names.push(format!("bn{}.beta", k + 1));
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    /// Copy all parameters and running statistics from another instance of
    /// the same architecture.
    pub fn copy_from(&mut self, other: &CnnClassifier) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::ClassSpaceMismatch(format!(
                "cannot copy {} into {}",
                other.cfg.arch_tag(),
                self.cfg.arch_tag()
            )));
        }
        for (dst, src) in self.params_mut().into_iter().zip(other.params()) {
            dst.data_mut().assign(src.data());
        }
        self.stem_bn.running_mean.assign(&other.stem_bn.running_mean);
        self.stem_bn.running_var.assign(&other.stem_bn.running_var);
        for (dst, src) in self.stage_bns.iter_mut().zip(&other.stage_bns) {
            dst.running_mean.assign(&src.running_mean);
            dst.running_var.assign(&src.running_var);
        }
        Ok(())
    }

    /// Full mutable state (parameters then running statistics) as one flat
    /// list, for cheap snapshot/restore.
    pub fn state_vec(&self) -> Vec<ArrayD<f64>> {
        let mut out: Vec<ArrayD<f64>> =
            self.params().iter().map(|p| p.data().clone()).collect();
        out.push(self.stem_bn.running_mean.clone().into_dyn());
        out.push(self.stem_bn.running_var.clone().into_dyn());
        for bn in &self.stage_bns {
            out.push(bn.running_mean.clone().into_dyn());
            out.push(bn.running_var.clone().into_dyn());
        }
        out
    }

    pub fn load_state_vec(&mut self, state: &[ArrayD<f64>]) {
        let n_params = self.params().len();
        for (p, s) in self.params_mut().into_iter().zip(&state[..n_params]) {
            *p.data_mut() = s.clone();
        }
        let mut it = state[n_params..].iter();
        self.stem_bn.running_mean = it.next().unwrap().clone().into_dimensionality().unwrap();
        self.stem_bn.running_var = it.next().unwrap().clone().into_dimensionality().unwrap();
        for bn in self.stage_bns.iter_mut() {
            bn.running_mean = it.next().unwrap().clone().into_dimensionality().unwrap();
            bn.running_var = it.next().unwrap().clone().into_dimensionality().unwrap();
        }
    }

    /// Digest over trainable parameters (frozen-teacher invariant checks).
    pub fn param_checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.params() {
            for v in p.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest over BN running statistics (read-only-during-synthesis checks).
    pub fn bn_checksum(&self) -> String {
        let mut h = Sha256::new();
        for l in self.bn_layers() {
            for v in l.running_mean.iter().chain(l.running_var.iter()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> super::checkpoint::Checkpoint {
        let mut ckpt = super::checkpoint::Checkpoint::new(
            "classifier",
            &self.cfg.arch_tag(),
            config_hash,
            self.seed,
        );
        ckpt.meta.insert(
            "classifier_config".into(),
            serde_json::to_value(&self.cfg).unwrap(),
        );
        for (name, p) in self.param_names().into_iter().zip(self.params()) {
            ckpt.put(&name, p.data());
        }
        ckpt.put("bn0.running_mean", &self.stem_bn.running_mean.clone().into_dyn());
        ckpt.put("bn0.running_var", &self.stem_bn.running_var.clone().into_dyn());
        for (k, bn) in self.stage_bns.iter().enumerate() {
            ckpt.put(
                &format!("bn{}.running_mean", k + 1),
                &bn.running_mean.clone().into_dyn(),
            );
            ckpt.put(
                &format!("bn{}.running_var", k + 1),
                &bn.running_var.clone().into_dyn(),
            );
        }
        ckpt
    }

    pub fn from_checkpoint(ckpt: &super::checkpoint::Checkpoint) -> Result<Self> {
        ckpt.expect_kind("classifier")?;
        let cfg: ClassifierConfig = serde_json::from_value(
            ckpt.meta
                .get("classifier_config")
                .ok_or_else(|| Error::Checkpoint("missing classifier_config".into()))?
                .clone(),
        )?;
        if cfg.arch_tag() != ckpt.arch {
            return Err(Error::Checkpoint(format!(
                "arch tag mismatch: {} vs {}",
                cfg.arch_tag(),
                ckpt.arch
            )));
        }
        let mut net = CnnClassifier::new(cfg, ckpt.seed)?;
        for (name, p) in net.param_names().into_iter().zip(net.params_mut()) {
            *p.data_mut() = ckpt.take(&name)?;
        }
        net.stem_bn.running_mean = ckpt.take_1d("bn0.running_mean")?;
        net.stem_bn.running_var = ckpt.take_1d("bn0.running_var")?;
        for (k, bn) in net.stage_bns.iter_mut().enumerate() {
            bn.running_mean = ckpt.take_1d(&format!("bn{}.running_mean", k + 1))?;
            bn.running_var = ckpt.take_1d(&format!("bn{}.running_var", k + 1))?;
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_shape;
    use approx::assert_abs_diff_eq;

    fn small_cfg() -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 1,
            resolution: 16,
            widths: vec![4, 6, 8, 10],
            num_classes: 3,
        }
    }

    #[test]
    fn forward_shapes_and_tap_resolutions() {
        let net = CnnClassifier::new(small_cfg(), 5).unwrap();
        let mut rng = crate::rng::seeded(6);
        let x = uniform_shape(&[2, 1, 16, 16], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let xt = tape.leaf(x);
        let out = net.forward(&tape, &xt);
        assert_eq!(out.logits.shape(), &[2, 3]);
        assert_eq!(out.bn_stats.len(), 4);
        assert_eq!(out.taps.len(), 3);
        for (k, tap) in out.taps.iter().enumerate() {
            assert_eq!(tap.shape()[2], net.tap_resolution(k));
            assert_eq!(tap.shape()[1], net.tap_channels(k));
        }
    }

    #[test]
    fn constant_zero_input_gives_zero_mean_floored_var() {
        // Conv of a zero image is zero pre-BN activation: mean 0, raw
        // variance 0, reported variance at the floor.
        let net = CnnClassifier::new(small_cfg(), 7).unwrap();
        let tape = Tape::new();
        let x = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[3, 1, 16, 16])));
        let stats = net.extract_batch_stats(&tape, &x);
        for c in 0..stats[0].mean.shape()[0] {
            assert_abs_diff_eq!(stats[0].mean.data()[[c]], 0.0, epsilon = 1e-12);
            assert_abs_diff_eq!(
                stats[0].var.data()[[c]],
                super::super::VARIANCE_FLOOR,
                epsilon = 1e-18
            );
        }
    }

    #[test]
    fn batch_stats_are_duplication_invariant() {
        let net = CnnClassifier::new(small_cfg(), 8).unwrap();
        let mut rng = crate::rng::seeded(9);
        let x = uniform_shape(&[3, 1, 16, 16], 0.0, 1.0, &mut rng);
        let doubled = ndarray::concatenate(ndarray::Axis(0), &[x.view(), x.view()]).unwrap();
        let tape = Tape::new();
        let s1 = net.extract_batch_stats(&tape, &tape.leaf(x));
        let s2 = net.extract_batch_stats(&tape, &tape.leaf(doubled));
        for (a, b) in s1.iter().zip(&s2) {
            for c in 0..a.mean.shape()[0] {
                assert_abs_diff_eq!(a.mean.data()[[c]], b.mean.data()[[c]], epsilon = 1e-9);
                assert_abs_diff_eq!(a.var.data()[[c]], b.var.data()[[c]], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn settled_running_stats_match_extracted_stats() {
        // Repeated train-mode passes over one fixed batch drive the running
        // averages to that batch's statistics; eval-mode extraction must then
        // reproduce them closely.
        let mut net = CnnClassifier::new(small_cfg(), 10).unwrap();
        let mut rng = crate::rng::seeded(11);
        let x = uniform_shape(&[8, 1, 16, 16], 0.0, 1.0, &mut rng);
        for _ in 0..200 {
            let tape = Tape::new();
            let xt = tape.leaf(x.clone());
            net.forward_train(&tape, &xt);
        }
        let tape = Tape::new();
        let stats = net.extract_batch_stats(&tape, &tape.leaf(x));
        for (layer, s) in net.bn_layers().iter().zip(&stats) {
            for c in 0..layer.running_mean.len() {
                assert_abs_diff_eq!(
                    s.mean.data()[[c]],
                    layer.running_mean[c],
                    epsilon = 1e-3
                );
                assert_abs_diff_eq!(s.var.data()[[c]], layer.running_var[c], epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let net = CnnClassifier::new(small_cfg(), 12).unwrap();
        let ckpt = net.to_checkpoint("deadbeef");
        let restored = CnnClassifier::from_checkpoint(&ckpt).unwrap();
        let mut rng = crate::rng::seeded(13);
        let x = uniform_shape(&[2, 1, 16, 16], 0.0, 1.0, &mut rng)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        assert_eq!(net.logits(&x), restored.logits(&x));
        assert_eq!(net.param_checksum(), restored.param_checksum());
    }

    #[test]
    fn copy_from_requires_matching_architecture() {
        let mut a = CnnClassifier::new(small_cfg(), 1).unwrap();
        let b = CnnClassifier::new(small_cfg(), 2).unwrap();
        a.copy_from(&b).unwrap();
        assert_eq!(a.param_checksum(), b.param_checksum());
        let mut tiny_cfg = small_cfg();
        tiny_cfg.widths = vec![2, 2, 2, 2];
        let c = CnnClassifier::new(tiny_cfg, 3).unwrap();
        assert!(a.copy_from(&c).is_err());
    }
}
