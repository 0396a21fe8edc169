//! Stage two: distill the student on the synthetic dataset.
//!
//! The loss is `weight_kl · L_KL + weight_cam · L_mSARC`:
//!
//! - `L_KL`: temperature-scaled `KL(teacher ‖ student)` averaged over the
//!   batch and multiplied by `τ²` so gradient magnitudes stay
//!   temperature-invariant.
//! - `L_mSARC`: mean squared error between L2-normalized class activation
//!   maps of paired student/teacher stages, summed over pairs. The final
//!   stage uses each network's own classifier-head weights; earlier taps use
//!   per-tap learned projections to class space trained jointly with the
//!   student (paired projections start identical so equal networks give a
//!   zero loss).
//!
//! During the loss both networks normalize with batch statistics — the
//! student in train mode (running averages update), the teacher in a frozen
//! batch-stat mode that never mutates its state — so a student initialized as
//! an exact copy of the teacher scores an exact zero at step 0, and the
//! student's batch norm still calibrates to the synthetic data it trains on.

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor};
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::nn::classifier::CnnClassifier;
use crate::nn::train::{accuracy, Adam};
use crate::nn::Param;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KDConfig {
    /// Coefficient on the KL term.
    pub weight_kl: f64,
    /// Coefficient on the CAM-consistency term.
    pub weight_cam: f64,
    pub kd_temperature: f64,
    /// `(student tap, teacher tap)` stage pairs.
    pub layer_pairs: Vec<(usize, usize)>,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for KDConfig {
    fn default() -> Self {
        KDConfig {
            weight_kl: 1.0,
            weight_cam: 1.0,
            kd_temperature: 4.0,
            layer_pairs: vec![(0, 0), (1, 1), (2, 2)],
            epochs_per_round: 30,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

impl KDConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weight_kl < 0.0 || self.weight_cam < 0.0 {
            return Err(Error::Config("KD weights must be >= 0".into()));
        }
        if self.kd_temperature <= 0.0 {
            return Err(Error::Config(format!(
                "kd_temperature must be > 0, got {}",
                self.kd_temperature
            )));
        }
        if self.weight_cam > 0.0 && self.layer_pairs.is_empty() {
            return Err(Error::Config(
                "weight_cam > 0 requires a nonempty layer-pair list".into(),
            ));
        }
        if self.epochs_per_round == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs_per_round and batch_size must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Temperature-scaled distillation KL, `τ²·mean_b KL(p_t^τ ‖ p_s^τ)`.
pub fn kd_kl_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    temperature: f64,
) -> Result<Tensor> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::contract(
            "kd_kl_loss",
            format!(
                "shape mismatch: {:?} vs {:?}",
                teacher_logits.shape(),
                student_logits.shape()
            ),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::contract(
            "kd_kl_loss",
            format!("temperature must be > 0, got {temperature}"),
        ));
    }
    let b = teacher_logits.shape()[0] as f64;
    let lt = teacher_logits
        .mul_scalar(1.0 / temperature)
        .log_softmax2d();
    let ls = student_logits
        .mul_scalar(1.0 / temperature)
        .log_softmax2d();
    let kl = lt.exp().mul(&lt.sub(&ls)).sum_all().mul_scalar(1.0 / b);
    Ok(kl.mul_scalar(temperature * temperature))
}

/// A batch of class activation maps from one tap.
pub struct CAMap {
    /// `[B,H,W]`.
    pub maps: Tensor,
    /// Items whose map was (numerically) all-zero when normalizing.
    pub zero_flags: Vec<bool>,
    pub normalized: bool,
    pub tap: usize,
}

/// Class-weighted channel sum: `cam[b] = Σ_c weights[y_b, c] · F[b, c]`.
///
/// Returns the raw (un-normalized) map.
pub fn compute_cam(
    features: &Tensor,
    class_weights: &Tensor,
    labels: &[usize],
    tap: usize,
) -> Result<CAMap> {
    if features.shape().len() != 4 {
        return Err(Error::contract(
            "compute_cam",
            format!("features must be [B,C,H,W], got {:?}", features.shape()),
        ));
    }
    if class_weights.shape().len() != 2 || class_weights.shape()[1] != features.shape()[1] {
        return Err(Error::contract(
            "compute_cam",
            format!(
                "class weights {:?} incompatible with {} feature channels",
                class_weights.shape(),
                features.shape()[1]
            ),
        ));
    }
    let rows = class_weights.select_rows(labels);
    let maps = features.mul_bc(&rows).sum_channels();
    Ok(CAMap {
        zero_flags: vec![false; labels.len()],
        maps,
        normalized: false,
        tap,
    })
}

impl CAMap {
    /// L2-normalize each map over its spatial grid. An all-zero map is
    /// returned unchanged and flagged so it can be excluded from losses.
    pub fn normalize(self) -> CAMap {
        let tape = self.maps.tape().clone();
        let norm_sq = self.maps.square().sum_per_item();
        let zero_flags: Vec<bool> = norm_sq.data().iter().map(|&v| v < 1e-20).collect();
        let mask: Vec<f64> = zero_flags.iter().map(|&z| if z { 0.0 } else { 1.0 }).collect();
        let inv = norm_sq.clamp_min(1e-20).sqrt().recip();
        let masked_inv = inv.mul(&tape.leaf(ndarray::Array1::from_vec(mask).into_dyn()));
        CAMap {
            maps: self.maps.mul_per_item(&masked_inv),
            zero_flags,
            normalized: true,
            tap: self.tap,
        }
    }
}

/// Projections that turn intermediate taps into class activation maps.
///
/// The final stage pair uses the networks' own head weights; earlier pairs
/// get learned `[num_classes, channels]` projections. Paired projections with
/// equal channel counts start from identical values.
pub struct MsarcHead {
    pairs: Vec<PairProjection>,
}

enum PairProjection {
    /// Both taps are final stages: use the classifier heads.
    HeadWeights { student_tap: usize, teacher_tap: usize },
    Learned {
        student_tap: usize,
        teacher_tap: usize,
        student: Param,
        teacher: Param,
    },
}

impl MsarcHead {
    pub fn new(
        student: &CnnClassifier,
        teacher: &CnnClassifier,
        cfg: &KDConfig,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let num_classes = teacher.cfg.num_classes;
        if student.cfg.num_classes != num_classes {
            return Err(Error::ClassSpaceMismatch(format!(
                "student has {} classes, teacher {num_classes}",
                student.cfg.num_classes
            )));
        }
        let mut pairs = Vec::new();
        for (idx, &(i, j)) in cfg.layer_pairs.iter().enumerate() {
            if i >= student.num_taps() || j >= teacher.num_taps() {
                return Err(Error::Config(format!(
                    "layer pair ({i},{j}) outside tap ranges {}x{}",
                    student.num_taps(),
                    teacher.num_taps()
                )));
            }
            let last = (student.num_taps() - 1, teacher.num_taps() - 1);
            if (i, j) == last {
                pairs.push(PairProjection::HeadWeights {
                    student_tap: i,
                    teacher_tap: j,
                });
            } else {
                let cs = student.tap_channels(i);
                let ct = teacher.tap_channels(j);
                let mut rng =
                    crate::rng::seeded(crate::rng::derive_seed(seed, "msarc-proj", &[idx as u64]));
                let s_proj = Param::randn(&[num_classes, cs], (1.0 / cs as f64).sqrt(), &mut rng);
                let t_proj = if cs == ct {
                    Param::new(s_proj.data().clone())
                } else {
                    Param::randn(&[num_classes, ct], (1.0 / ct as f64).sqrt(), &mut rng)
                };
                pairs.push(PairProjection::Learned {
                    student_tap: i,
                    teacher_tap: j,
                    student: s_proj,
                    teacher: t_proj,
                });
            }
        }
        Ok(MsarcHead { pairs })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for p in &self.pairs {
            if let PairProjection::Learned { student, teacher, .. } = p {
                out.push(student);
                out.push(teacher);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for p in &mut self.pairs {
            if let PairProjection::Learned { student, teacher, .. } = p {
                out.push(student);
                out.push(teacher);
            }
        }
        out
    }

    /// Sum over pairs of the MSE between L2-normalized CAMs; the student map
    /// is bilinearly resized to the teacher map's grid when they differ.
    pub fn msarc_loss(
        &self,
        tape: &Tape,
        student: &CnnClassifier,
        teacher: &CnnClassifier,
        student_taps: &[Tensor],
        teacher_taps: &[Tensor],
        labels: &[usize],
    ) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for pair in &self.pairs {
            let (s_tap, t_tap, s_w, t_w) = match pair {
                PairProjection::HeadWeights {
                    student_tap,
                    teacher_tap,
                } => (
                    *student_tap,
                    *teacher_tap,
                    student.head_weight_param().bind(tape),
                    teacher.head_weight_param().bind(tape),
                ),
                PairProjection::Learned {
                    student_tap,
                    teacher_tap,
                    student,
                    teacher,
                } => (
                    *student_tap,
                    *teacher_tap,
                    student.bind(tape),
                    teacher.bind(tape),
                ),
            };
            let cam_s = compute_cam(&student_taps[s_tap], &s_w, labels, s_tap)?;
            let cam_t = compute_cam(&teacher_taps[t_tap], &t_w, labels, t_tap)?;
            let (th, tw) = (cam_t.maps.shape()[1], cam_t.maps.shape()[2]);
            let cam_s = CAMap {
                maps: cam_s.maps.resize_bilinear(th, tw),
                ..cam_s
            }
            .normalize();
            let cam_t = cam_t.normalize();
            // An all-zero map on either side contributes zero loss.
            let mask: Vec<f64> = cam_s
                .zero_flags
                .iter()
                .zip(&cam_t.zero_flags)
                .map(|(a, b)| if *a || *b { 0.0 } else { 1.0 })
                .collect();
            let mask_t = tape.leaf(ndarray::Array1::from_vec(mask).into_dyn());
            let diff = cam_s.maps.sub(&cam_t.maps).mul_per_item(&mask_t);
            let mse = diff.square().mean_all();
            total = Some(match total {
                Some(acc) => acc.add(&mse),
                None => mse,
            });
        }
        total.ok_or_else(|| Error::Config("msarc_loss needs at least one layer pair".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillEpochMetric {
    pub round: usize,
    pub epoch: usize,
    pub l_kl: f64,
    pub l_msarc: f64,
    pub total: f64,
    pub eval_accuracy: Option<f64>,
}

fn snapshot(params: &[&Param]) -> Vec<ArrayD<f64>> {
    params.iter().map(|p| p.data().clone()).collect()
}

fn restore(params: Vec<&mut Param>, snap: &[ArrayD<f64>]) {
    for (p, s) in params.into_iter().zip(snap) {
        *p.data_mut() = s.clone();
    }
}

/// Train the student on the synthetic dataset for `epochs_per_round` epochs.
///
/// The teacher is frozen. On a NaN loss the students' last epoch-start
/// parameters are restored before the error is returned.
pub fn distill_round(
    student: &mut CnnClassifier,
    teacher: &CnnClassifier,
    msarc: &mut MsarcHead,
    dataset: &ImageDataset,
    eval: Option<&ImageDataset>,
    cfg: &KDConfig,
    round: usize,
    seed: u64,
) -> Result<Vec<DistillEpochMetric>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("synthetic dataset is empty".into()));
    }
    if dataset.num_classes != student.cfg.num_classes {
        return Err(Error::ClassSpaceMismatch(format!(
            "dataset has {} classes, student {}",
            dataset.num_classes, student.cfg.num_classes
        )));
    }
    let mut rng = crate::rng::seeded(seed);
    let mut adam = {
        let mut params = student.params();
        params.extend(msarc.params());
        Adam::new(cfg.lr, &params)
    };
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs_per_round {
        let snap_student = student.state_vec();
        let snap_msarc = snapshot(&msarc.params());
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let (mut kl_sum, mut ms_sum, mut total_sum) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = dataset.batch(chunk);
            let tape = Tape::new();
            let x = tape.leaf(images.into_dyn());
            let t_out = teacher.forward_with_batch_stats(&tape, &x);
            let s_out = student.forward_train(&tape, &x);
            let l_kl = kd_kl_loss(&t_out.logits, &s_out.logits, cfg.kd_temperature)?;
            let l_ms = if cfg.weight_cam != 0.0 {
                Some(msarc.msarc_loss(
                    &tape,
                    student,
                    teacher,
                    &s_out.taps,
                    &t_out.taps,
                    &labels,
                )?)
            } else {
                None
            };
            let mut loss = l_kl.mul_scalar(cfg.weight_kl);
            if let Some(l_ms) = &l_ms {
                loss = loss.add(&l_ms.mul_scalar(cfg.weight_cam));
            }
            let loss_v = loss.item();
            if !loss_v.is_finite() {
                student.load_state_vec(&snap_student);
                restore(msarc.params_mut(), &snap_msarc);
                return Err(Error::DistillAborted(format!(
                    "non-finite loss in round {round} epoch {epoch}; last-good checkpoint restored"
                )));
            }
            let grads = loss.backward();
            let gvec: Vec<ArrayD<f64>> = student
                .params()
                .iter()
                .chain(msarc.params().iter())
                .map(|p| p.grad(&grads))
                .collect();
            {
                let mut params = student.params_mut();
                params.extend(msarc.params_mut());
                adam.step(params, &gvec);
            }
            kl_sum += l_kl.item();
            ms_sum += l_ms.as_ref().map(|t| t.item()).unwrap_or(0.0);
            total_sum += loss_v;
            batches += 1;
        }
        let n = batches as f64;
        curve.push(DistillEpochMetric {
            round,
            epoch,
            l_kl: kl_sum / n,
            l_msarc: ms_sum / n,
            total: total_sum / n,
            eval_accuracy: eval.map(|ds| accuracy(student, ds)),
        });
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, teacher_domain};
    use crate::nn::classifier::ClassifierConfig;
    use crate::nn::uniform_shape;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;

    fn cls_cfg(widths: Vec<usize>) -> ClassifierConfig {
        ClassifierConfig {
            in_channels: 1,
            resolution: 16,
            widths,
            num_classes: 2,
        }
    }

    #[test]
    fn kd_kl_identical_logits_is_zero_and_nonnegative_otherwise() {
        let tape = Tape::new();
        let l = tape.leaf(arr2(&[[1.0, -2.0], [0.5, 0.5]]).into_dyn());
        assert_eq!(kd_kl_loss(&l, &l, 4.0).unwrap().item(), 0.0);
        let mut rng = crate::rng::seeded(1);
        for _ in 0..20 {
            let a = tape.leaf(uniform_shape(&[3, 5], -2.0, 2.0, &mut rng));
            let b = tape.leaf(uniform_shape(&[3, 5], -2.0, 2.0, &mut rng));
            assert!(kd_kl_loss(&a, &b, 2.0).unwrap().item() >= -1e-12);
        }
    }

    #[test]
    fn kd_kl_matches_direct_oracle_at_two_temperatures() {
        let t_logits = [1.3, -0.4];
        let s_logits = [0.2, 0.9];
        for tau in [1.0, 4.0] {
            let tape = Tape::new();
            let t = tape.leaf(arr2(&[t_logits]).into_dyn());
            let s = tape.leaf(arr2(&[s_logits]).into_dyn());
            let got = kd_kl_loss(&t, &s, tau).unwrap().item();
            // brute-force formula evaluation
            let soft = |l: &[f64; 2]| {
                let e0 = (l[0] / tau).exp();
                let e1 = (l[1] / tau).exp();
                [e0 / (e0 + e1), e1 / (e0 + e1)]
            };
            let pt = soft(&t_logits);
            let ps = soft(&s_logits);
            let kl: f64 = pt
                .iter()
                .zip(&ps)
                .map(|(p, q)| p * (p / q).ln())
                .sum();
            assert_abs_diff_eq!(got, tau * tau * kl, epsilon = 1e-6);
        }
    }

    #[test]
    fn cam_of_zero_features_is_flagged_zero() {
        let tape = Tape::new();
        let f = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 3, 2, 2])));
        let w = tape.leaf(uniform_shape(&[2, 3], -1.0, 1.0, &mut crate::rng::seeded(2)));
        let cam = compute_cam(&f, &w, &[0, 1], 0).unwrap().normalize();
        assert!(cam.zero_flags.iter().all(|&z| z));
        assert!(cam.maps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cam_single_channel_identity_weight_is_normalized_feature() {
        let tape = Tape::new();
        let mut rng = crate::rng::seeded(3);
        let f0 = uniform_shape(&[1, 1, 2, 2], 0.1, 1.0, &mut rng);
        let f = tape.leaf(f0.clone());
        let w = tape.leaf(ndarray::ArrayD::ones(ndarray::IxDyn(&[1, 1])));
        let cam = compute_cam(&f, &w, &[0], 0).unwrap().normalize();
        let norm: f64 = f0.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, want) in cam.maps.data().iter().zip(f0.iter()) {
            assert_abs_diff_eq!(*got, want / norm, epsilon = 1e-12);
        }
    }

    #[test]
    fn cam_matches_hand_arithmetic() {
        // 2 channels, 2x2 maps, hand-set weights.
        let tape = Tape::new();
        let mut f = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 2, 2, 2]));
        f[[0, 0, 0, 0]] = 1.0;
        f[[0, 0, 0, 1]] = 2.0;
        f[[0, 0, 1, 0]] = 3.0;
        f[[0, 0, 1, 1]] = 4.0;
        f[[0, 1, 0, 0]] = -1.0;
        f[[0, 1, 0, 1]] = 0.5;
        f[[0, 1, 1, 0]] = 2.0;
        f[[0, 1, 1, 1]] = 0.0;
        let w = arr2(&[[2.0, -1.0], [0.0, 1.0]]).into_dyn();
        let cam = compute_cam(&tape.leaf(f), &tape.leaf(w), &[0], 1).unwrap();
        // class 0 weights (2, −1): map = 2·F0 − F1
        let want = [3.0, 3.5, 4.0, 8.0];
        for (got, want) in cam.maps.data().iter().zip(want.iter()) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn msarc_zero_for_identical_networks_and_scale_invariant() {
        let cfg = KDConfig::default();
        let teacher = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 7).unwrap();
        let mut student = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 8).unwrap();
        student.copy_from(&teacher).unwrap();
        let msarc = MsarcHead::new(&student, &teacher, &cfg, 9).unwrap();
        let mut rng = crate::rng::seeded(10);
        let x = uniform_shape(&[3, 1, 16, 16], 0.0, 1.0, &mut rng);
        let tape = Tape::new();
        let xt = tape.leaf(x);
        let t_out = teacher.forward(&tape, &xt);
        let s_out = student.forward(&tape, &xt);
        let labels = [0, 1, 0];
        let loss = msarc
            .msarc_loss(&tape, &student, &teacher, &s_out.taps, &t_out.taps, &labels)
            .unwrap();
        assert_eq!(loss.item(), 0.0);
        // Positive scaling of the student maps is removed by normalization.
        let scaled: Vec<Tensor> = s_out.taps.iter().map(|t| t.mul_scalar(3.7)).collect();
        let loss = msarc
            .msarc_loss(&tape, &student, &teacher, &scaled, &t_out.taps, &labels)
            .unwrap();
        assert_abs_diff_eq!(loss.item(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn msarc_hand_oracle_on_2x2_maps() {
        // Single-channel taps with unit projections make the CAM equal the
        // feature map; hand-compute the normalized MSE.
        let cfg = KDConfig {
            layer_pairs: vec![(0, 0)],
            ..Default::default()
        };
        let teacher = CnnClassifier::new(cls_cfg(vec![4, 1, 8, 10]), 11).unwrap();
        let student = CnnClassifier::new(cls_cfg(vec![4, 1, 8, 10]), 12).unwrap();
        let mut msarc = MsarcHead::new(&student, &teacher, &cfg, 13).unwrap();
        for p in msarc.params_mut() {
            p.data_mut().fill(1.0);
        }
        let tape = Tape::new();
        let s_map = [1.0, 0.0, 0.0, 0.0];
        let t_map = [0.0, 1.0, 0.0, 0.0];
        let s_tap = tape.leaf(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 2]), s_map.to_vec())
                .unwrap(),
        );
        let t_tap = tape.leaf(
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[1, 1, 2, 2]), t_map.to_vec())
                .unwrap(),
        );
        let loss = msarc
            .msarc_loss(
                &tape,
                &student,
                &teacher,
                &[s_tap.clone(), s_tap.clone(), s_tap.clone()],
                &[t_tap.clone(), t_tap.clone(), t_tap],
                &[0],
            )
            .unwrap();
        // Both maps are already unit norm; MSE = ((1−0)² + (0−1)²)/4 = 0.5.
        assert_abs_diff_eq!(loss.item(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn config_rejects_cam_weight_without_pairs() {
        let cfg = KDConfig {
            layer_pairs: vec![],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let ok = KDConfig {
            layer_pairs: vec![],
            weight_cam: 0.0,
            ..Default::default()
        };
        assert!(ok.validate().is_ok());
    }

    fn toy_dataset(seed: u64) -> ImageDataset {
        generate_dataset(&[0, 1], 8, 16, &teacher_domain(), seed).unwrap()
    }

    #[test]
    fn copy_initialized_student_has_zero_loss_at_step_zero() {
        let teacher = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 21).unwrap();
        let mut student = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 22).unwrap();
        student.copy_from(&teacher).unwrap();
        let cfg = KDConfig {
            epochs_per_round: 1,
            lr: 0.0,
            ..Default::default()
        };
        let mut msarc = MsarcHead::new(&student, &teacher, &cfg, 23).unwrap();
        let ds = toy_dataset(24);
        let metrics = distill_round(
            &mut student,
            &teacher,
            &mut msarc,
            &ds,
            None,
            &cfg,
            1,
            25,
        )
        .unwrap();
        assert_eq!(metrics[0].total, 0.0);
        assert_eq!(metrics[0].l_kl, 0.0);
        assert_eq!(metrics[0].l_msarc, 0.0);
    }

    #[test]
    fn weight_cam_zero_reduces_to_plain_kl() {
        let teacher = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 31).unwrap();
        let mut student = CnnClassifier::new(cls_cfg(vec![3, 4, 5, 6]), 32).unwrap();
        let cfg = KDConfig {
            weight_cam: 0.0,
            epochs_per_round: 2,
            ..Default::default()
        };
        let mut msarc = MsarcHead::new(&student, &teacher, &cfg, 33).unwrap();
        let ds = toy_dataset(34);
        let metrics = distill_round(
            &mut student,
            &teacher,
            &mut msarc,
            &ds,
            None,
            &cfg,
            1,
            35,
        )
        .unwrap();
        for m in &metrics {
            assert_eq!(m.l_msarc, 0.0);
            assert_abs_diff_eq!(m.total, cfg.weight_kl * m.l_kl, epsilon = 1e-9);
        }
    }

    #[test]
    fn teacher_stays_frozen_and_loss_decomposes() {
        let teacher = CnnClassifier::new(cls_cfg(vec![4, 6, 8, 10]), 41).unwrap();
        let mut student = CnnClassifier::new(cls_cfg(vec![3, 4, 5, 6]), 42).unwrap();
        let cfg = KDConfig {
            epochs_per_round: 3,
            weight_kl: 0.7,
            weight_cam: 1.3,
            ..Default::default()
        };
        let mut msarc = MsarcHead::new(&student, &teacher, &cfg, 43).unwrap();
        let ds = toy_dataset(44);
        let before = teacher.param_checksum();
        let metrics = distill_round(
            &mut student,
            &teacher,
            &mut msarc,
            &ds,
            Some(&ds),
            &cfg,
            1,
            45,
        )
        .unwrap();
        assert_eq!(teacher.param_checksum(), before);
        for m in &metrics {
            assert_abs_diff_eq!(
                m.total,
                cfg.weight_kl * m.l_kl + cfg.weight_cam * m.l_msarc,
                epsilon = 1e-6
            );
            assert!(m.eval_accuracy.is_some());
        }
    }

    #[test]
    fn distillation_moves_student_toward_teacher_predictions() {
        let train = generate_dataset(&[0, 1], 40, 16, &teacher_domain(), 51).unwrap();
        let mut teacher = CnnClassifier::new(cls_cfg(vec![6, 8, 12, 16]), 52).unwrap();
        crate::nn::train::train_classifier(
            &mut teacher,
            &train,
            None,
            &crate::nn::train::SupervisedTrainConfig {
                epochs: 8,
                accuracy_floor: 0.0,
                ..Default::default()
            },
            53,
        )
        .unwrap();
        let mut student = CnnClassifier::new(cls_cfg(vec![3, 4, 5, 6]), 54).unwrap();
        let cfg = KDConfig {
            epochs_per_round: 10,
            ..Default::default()
        };
        let mut msarc = MsarcHead::new(&student, &teacher, &cfg, 55).unwrap();
        let metrics = distill_round(
            &mut student,
            &teacher,
            &mut msarc,
            &train,
            Some(&train),
            &cfg,
            1,
            56,
        )
        .unwrap();
        let first = metrics.first().unwrap();
        let last = metrics.last().unwrap();
        assert!(last.total < first.total, "KD loss should decrease");
        assert!(last.eval_accuracy.unwrap() > 0.7, "student should learn");
    }
}
