//! Unified inversion loss guiding data synthesis toward the teacher's domain.
//!
//! Three terms over a batch of candidate images:
//!
//! - `L_bn`: closed-form KL between the diagonal Gaussians given by the batch
//!   statistics of the teacher's pre-BN activations and the teacher's stored
//!   running statistics (direction: batch ‖ running), summed over channels
//!   and layers. Always `>= 0`.
//! - `L_cls`: mean cross-entropy of the teacher's logits against the target
//!   class. Always `>= 0`.
//! - `L_adv`: negative temperature-scaled KL between teacher and student
//!   predictions, so minimizing it maximizes their disagreement.
//!   Always `<= 0`.
//!
//! The unified loss is `α·L_bn + β·L_cls + γ·L_adv`, differentiable with
//! respect to the images.

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::nn::classifier::{BnLayerStats, CnnClassifier};
use crate::nn::BnBatchStats;

/// Guidance configuration for latent editing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct InversionWeights {
    /// Weight of the batch-norm statistic term.
    pub alpha: f64,
    /// Weight of the class-prior term.
    pub beta: f64,
    /// Weight of the adversarial term.
    pub gamma: f64,
    /// Softmax temperature of the adversarial term.
    pub tau: f64,
    /// Latent-edit step size.
    pub eta: f64,
}

impl Default for InversionWeights {
    fn default() -> Self {
        InversionWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            tau: 4.0,
            eta: 0.3,
        }
    }
}

impl InversionWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.gamma, self.tau, self.eta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("inversion weights must be finite".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 || self.eta < 0.0 {
            return Err(Error::Config(
                "inversion weights alpha/beta/gamma/eta must be >= 0".into(),
            ));
        }
        if self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Per-term values of one evaluation, for metrics streams.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub l_bn: f64,
    pub l_cls: f64,
    pub l_adv: f64,
    pub total: f64,
}

/// Sum over layers and channels of
/// `KL(N(μ_b, σ²_b) ‖ N(μ_r, σ²_r)) = ½ln(σ²_r/σ²_b) + (σ²_b + (μ_b−μ_r)²)/(2σ²_r) − ½`.
pub fn bn_loss(batch_stats: &[BnBatchStats], running_stats: &[BnLayerStats]) -> Result<Tensor> {
    if batch_stats.len() != running_stats.len() {
        return Err(Error::contract(
            "bn_loss",
            format!(
                "{} batch-stat layers vs {} running-stat layers",
                batch_stats.len(),
                running_stats.len()
            ),
        ));
    }
    if batch_stats.is_empty() {
        return Err(Error::contract("bn_loss", "no layers to compare"));
    }
    let tape = batch_stats[0].mean.tape().clone();
    let mut total: Option<Tensor> = None;
    for (b, r) in batch_stats.iter().zip(running_stats) {
        let channels = b.mean.shape()[0];
        if channels != r.running_mean.len() {
            return Err(Error::contract(
                "bn_loss",
                format!(
                    "layer {}: {} batch channels vs {} running channels",
                    r.layer_id,
                    channels,
                    r.running_mean.len()
                ),
            ));
        }
        for &v in r.running_var.iter() {
            if v <= 0.0 {
                return Err(Error::contract(
                    "bn_loss",
                    format!("layer {}: running variance must be > 0", r.layer_id),
                ));
            }
        }
        let mu_r = tape.leaf(r.running_mean.clone().into_dyn());
        let ln_var_r = tape.leaf(r.running_var.mapv(f64::ln).into_dyn());
        let inv_2var_r = tape.leaf(r.running_var.mapv(|v| 1.0 / (2.0 * v)).into_dyn());
        let dmu2 = b.mean.sub(&mu_r).square();
        let quad = b.var.add(&dmu2).mul(&inv_2var_r);
        let log_term = ln_var_r.sub(&b.var.ln()).mul_scalar(0.5);
        let layer = log_term.add(&quad).add_scalar(-0.5).sum_all();
        total = Some(match total {
            Some(acc) => acc.add(&layer),
            None => layer,
        });
    }
    Ok(total.unwrap())
}

/// Mean cross-entropy of logits against target classes.
pub fn class_prior_loss(logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
    if logits.shape().len() != 2 || logits.shape()[1] == 0 {
        return Err(Error::contract(
            "class_prior_loss",
            format!("need [B,C] logits with C >= 1, got {:?}", logits.shape()),
        ));
    }
    if logits.shape()[0] != targets.len() {
        return Err(Error::contract(
            "class_prior_loss",
            format!(
                "batch {} vs {} targets",
                logits.shape()[0],
                targets.len()
            ),
        ));
    }
    let c = logits.shape()[1];
    for &y in targets {
        if y >= c {
            return Err(Error::contract(
                "class_prior_loss",
                format!("target {y} outside [0, {c})"),
            ));
        }
    }
    Ok(logits.log_softmax2d().nll(targets))
}

/// `−KL(softmax(teacher/τ) ‖ softmax(student/τ))`, averaged over the batch.
pub fn adversarial_loss(
    teacher_logits: &Tensor,
    student_logits: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::contract(
            "adversarial_loss",
            format!(
                "shape mismatch: {:?} vs {:?}",
                teacher_logits.shape(),
                student_logits.shape()
            ),
        ));
    }
    if tau <= 0.0 {
        return Err(Error::contract(
            "adversarial_loss",
            format!("temperature must be > 0, got {tau}"),
        ));
    }
    let b = teacher_logits.shape()[0] as f64;
    let lt = teacher_logits.mul_scalar(1.0 / tau).log_softmax2d();
    let ls = student_logits.mul_scalar(1.0 / tau).log_softmax2d();
    let kl = lt.exp().mul(&lt.sub(&ls)).sum_all().mul_scalar(1.0 / b);
    Ok(kl.neg())
}

/// Evaluate `α·L_bn + β·L_cls + γ·L_adv` on a batch of images.
///
/// The teacher runs in eval mode; its batch statistics feed `L_bn`. With
/// `γ = 0` the student is never consulted and may be absent. Terms with a
/// zero weight are skipped entirely, so an all-zero weighting returns a
/// constant-zero loss with no gradient path.
pub fn inversion_loss(
    images: &Tensor,
    targets: &[usize],
    teacher: &CnnClassifier,
    student: Option<&CnnClassifier>,
    w: &InversionWeights,
) -> Result<(Tensor, LossBreakdown)> {
    inversion_loss_subset(images, targets, teacher, student, w, None)
}

/// [`inversion_loss`] with the BN term restricted to a subset of layer ids
/// (`None` = all layers).
pub fn inversion_loss_subset(
    images: &Tensor,
    targets: &[usize],
    teacher: &CnnClassifier,
    student: Option<&CnnClassifier>,
    w: &InversionWeights,
    bn_subset: Option<&[usize]>,
) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let tape = images.tape().clone();
    let t_out = teacher.forward(&tape, images);

    let running = teacher.bn_layers();
    let (batch_stats, running_stats) = match bn_subset {
        None => (t_out.bn_stats, running),
        Some(ids) => {
            let mut bs = Vec::new();
            let mut rs = Vec::new();
            for &id in ids {
                if id >= running.len() {
                    return Err(Error::Config(format!(
                        "bn layer subset id {id} outside 0..{}",
                        running.len()
                    )));
                }
                bs.push(BnBatchStats {
                    mean: t_out.bn_stats[id].mean.clone(),
                    var: t_out.bn_stats[id].var.clone(),
                });
                rs.push(running[id].clone());
            }
            (bs, rs)
        }
    };
    let l_bn = bn_loss(&batch_stats, &running_stats)?;
    let l_cls = class_prior_loss(&t_out.logits, targets)?;
    let l_adv = if w.gamma != 0.0 {
        let student = student.ok_or_else(|| {
            Error::contract("inversion_loss", "gamma > 0 requires a student")
        })?;
        let s_out = student.forward(&tape, images);
        Some(adversarial_loss(&t_out.logits, &s_out.logits, w.tau)?)
    } else {
        None
    };

    let bd = LossBreakdown {
        l_bn: l_bn.item(),
        l_cls: l_cls.item(),
        l_adv: l_adv.as_ref().map(|t| t.item()).unwrap_or(0.0),
        total: 0.0,
    };
    // Sign contracts (tiny slack for float rounding in the KL terms).
    debug_assert!(bd.l_bn >= -1e-9, "L_bn must be >= 0, got {}", bd.l_bn);
    debug_assert!(bd.l_cls >= -1e-12, "L_cls must be >= 0, got {}", bd.l_cls);
    debug_assert!(bd.l_adv <= 1e-9, "L_adv must be <= 0, got {}", bd.l_adv);

    let mut total: Option<Tensor> = None;
    let push = |t: Tensor, acc: &mut Option<Tensor>| {
        *acc = Some(match acc.take() {
            Some(a) => a.add(&t),
            None => t,
        });
    };
    if w.alpha != 0.0 {
        push(l_bn.mul_scalar(w.alpha), &mut total);
    }
    if w.beta != 0.0 {
        push(l_cls.mul_scalar(w.beta), &mut total);
    }
    if let Some(l_adv) = &l_adv {
        if w.gamma != 0.0 {
            push(l_adv.mul_scalar(w.gamma), &mut total);
        }
    }
    let total = total.unwrap_or_else(|| tape.scalar(0.0));
    let bd = LossBreakdown {
        total: total.item(),
        ..bd
    };
    Ok((total, bd))
}
