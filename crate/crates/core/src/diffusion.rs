//! Noise schedules and network-independent sampling primitives.
//!
//! A [`NoiseSchedule`] holds the cumulative signal coefficients `ᾱ_t` for
//! `t = 0..=T` with `ᾱ_0 = 1`. Sampling uses three pure functions:
//!
//! - [`classifier_free_noise`]: `ε̂ = ε_∅ + s·(ε_c − ε_∅)`
//! - [`predict_x0`]:            `ẑ_0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`
//! - [`ancestral_step`]:        `z_{t−1} = √ᾱ_{t−1}·ẑ_0 + √(1−ᾱ_{t−1})·ε`
//!
//! The ancestral step re-noises the predicted clean latent directly to the
//! next noise level; because `ᾱ_0 = 1`, the step at `t = 1` emits `ẑ_0`
//! noise-free. Noise is always injected by the caller, never sampled here,
//! so identical inputs give bit-identical outputs from any worker thread.

use ndarray::{Array4, ArrayD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Schedule family, selectable from the run config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Squared-cosine cumulative schedule (default).
    Cosine,
    /// Linear per-step beta schedule.
    Linear,
}

/// Per-timestep cumulative signal coefficients of the diffusion process.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    num_steps: usize,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Squared-cosine schedule with per-step betas clipped to `0.999` so all
    /// coefficients stay strictly positive.
    pub fn cosine(num_steps: usize) -> Result<Self> {
        let t_max = num_steps as f64;
        let s = 0.008;
        let f = |t: f64| ((t / t_max + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2);
        let f0 = f(0.0);
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        for t in 1..=num_steps {
            let raw = f(t as f64) / f0;
            let beta = (1.0 - raw / alpha_bar[t - 1]).min(0.999);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    /// Linear beta schedule `β_t = β_start + (t−1)/(T−1)·(β_end − β_start)`.
    pub fn linear_beta(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(0.0..1.0).contains(&beta_start) || !(0.0..1.0).contains(&beta_end) {
            return Err(Error::Config(format!(
                "betas must lie in (0,1), got start={beta_start}, end={beta_end}"
            )));
        }
        let mut alpha_bar = vec![1.0];
        for t in 1..=num_steps {
            let frac = if num_steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (num_steps - 1) as f64
            };
            let beta = beta_start + frac * (beta_end - beta_start);
            alpha_bar.push(alpha_bar[t - 1] * (1.0 - beta));
        }
        Self::from_alpha_bar(alpha_bar)
    }

    pub fn from_kind(kind: ScheduleKind, num_steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Cosine => Self::cosine(num_steps),
            // Desk-scale default betas chosen so ᾱ_T is small for T ~ 10.
            ScheduleKind::Linear => Self::linear_beta(num_steps, 0.02, 0.5),
        }
    }

    /// Validate and wrap an explicit coefficient sequence `ᾱ_0..=ᾱ_T`.
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::Config(
                "schedule needs at least one step (two coefficients)".into(),
            ));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::Config(format!(
                "alpha_bar[0] must be exactly 1, got {}",
                alpha_bar[0]
            )));
        }
        for (t, &a) in alpha_bar.iter().enumerate() {
            if !a.is_finite() || a <= 0.0 || a > 1.0 {
                return Err(Error::Config(format!(
                    "alpha_bar[{t}] = {a} outside (0, 1]"
                )));
            }
            if t > 0 && a > alpha_bar[t - 1] {
                return Err(Error::Config(format!(
                    "alpha_bar must be non-increasing, violated at t={t}"
                )));
            }
        }
        Ok(NoiseSchedule {
            num_steps: alpha_bar.len() - 1,
            alpha_bar,
        })
    }

    /// Wrap a coefficient sequence without validation. Test support for
    /// exercising degenerate schedules (e.g. `ᾱ = 0`) against the error
    /// paths of the sampling primitives.
    pub fn from_alpha_bar_unchecked(alpha_bar: Vec<f64>) -> Self {
        NoiseSchedule {
            num_steps: alpha_bar.len() - 1,
            alpha_bar,
        }
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.alpha_bar
    }
}

/// A batch of latents sharing one timestep, with targets and RNG lineage.
#[derive(Debug, Clone)]
pub struct LatentBatch {
    pub data: Array4<f64>,
    pub timestep: usize,
    pub class_targets: Vec<usize>,
    pub rng_seed: u64,
}

impl LatentBatch {
    pub fn new(
        data: Array4<f64>,
        timestep: usize,
        class_targets: Vec<usize>,
        rng_seed: u64,
    ) -> Result<Self> {
        if data.shape()[0] != class_targets.len() {
            return Err(Error::contract(
                "LatentBatch::new",
                format!(
                    "batch size {} != target count {}",
                    data.shape()[0],
                    class_targets.len()
                ),
            ));
        }
        Ok(LatentBatch {
            data,
            timestep,
            class_targets,
            rng_seed,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.data.shape()[0]
    }

    /// Check the label-range invariant against a concrete class count.
    pub fn validate_targets(&self, num_classes: usize) -> Result<()> {
        for &y in &self.class_targets {
            if y >= num_classes {
                return Err(Error::contract(
                    "LatentBatch::validate_targets",
                    format!("target {y} outside [0, {num_classes})"),
                ));
            }
        }
        Ok(())
    }
}

/// Classifier-free guidance configuration.
#[derive(Debug, Clone)]
pub struct GuidanceSpec {
    pub scale: f64,
    /// Class-condition id per batch item.
    pub conditions: Vec<usize>,
    /// Embedding id of the trainable null condition.
    pub null_condition: usize,
}

impl GuidanceSpec {
    pub fn new(scale: f64, conditions: Vec<usize>, null_condition: usize) -> Result<Self> {
        if !scale.is_finite() || scale < 1.0 {
            return Err(Error::contract(
                "GuidanceSpec::new",
                format!("guidance scale must be >= 1, got {scale}"),
            ));
        }
        Ok(GuidanceSpec {
            scale,
            conditions,
            null_condition,
        })
    }
}

/// Combine conditional and unconditional noise predictions.
///
/// `scale == 1` returns the conditional prediction bit-for-bit.
pub fn classifier_free_noise(
    eps_cond: &ArrayD<f64>,
    eps_uncond: &ArrayD<f64>,
    spec: &GuidanceSpec,
) -> Result<ArrayD<f64>> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::contract(
            "classifier_free_noise",
            format!(
                "shape mismatch: {:?} vs {:?}",
                eps_cond.shape(),
                eps_uncond.shape()
            ),
        ));
    }
    if spec.scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    Ok(eps_uncond + &(spec.scale * &(eps_cond - eps_uncond)))
}

/// One-shot estimate of the clean latent from a noisy latent and predicted
/// noise: `(z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn predict_x0(
    z: &LatentBatch,
    eps_hat: &Array4<f64>,
    schedule: &NoiseSchedule,
) -> Result<Array4<f64>> {
    let t = z.timestep;
    if t == 0 {
        return Err(Error::contract(
            "predict_x0",
            "timestep 0 holds a clean latent; nothing to predict",
        ));
    }
    if t > schedule.num_steps() {
        return Err(Error::contract(
            "predict_x0",
            format!("timestep {t} beyond schedule length {}", schedule.num_steps()),
        ));
    }
    if z.data.shape() != eps_hat.shape() {
        return Err(Error::contract(
            "predict_x0",
            format!(
                "shape mismatch: {:?} vs {:?}",
                z.data.shape(),
                eps_hat.shape()
            ),
        ));
    }
    let a = schedule.alpha_bar(t);
    if a == 0.0 {
        return Err(Error::SingularSchedule(format!(
            "alpha_bar[{t}] = 0, predicted x0 undefined"
        )));
    }
    let sqrt_a = a.sqrt();
    let sqrt_1m = (1.0 - a).sqrt();
    Ok((&z.data - &(sqrt_1m * eps_hat)) / sqrt_a)
}

/// Re-noise a predicted clean latent to the previous timestep's level:
/// `√ᾱ_{t−1}·ẑ_0 + √(1−ᾱ_{t−1})·ε`.
pub fn ancestral_step(
    x0_hat: &Array4<f64>,
    schedule: &NoiseSchedule,
    t: usize,
    noise: &Array4<f64>,
) -> Result<Array4<f64>> {
    if t == 0 || t > schedule.num_steps() {
        return Err(Error::contract(
            "ancestral_step",
            format!("timestep {t} outside 1..={}", schedule.num_steps()),
        ));
    }
    if x0_hat.shape() != noise.shape() {
        return Err(Error::contract(
            "ancestral_step",
            format!(
                "shape mismatch: {:?} vs {:?}",
                x0_hat.shape(),
                noise.shape()
            ),
        ));
    }
    let a_prev = schedule.alpha_bar(t - 1);
    Ok(&(a_prev.sqrt() * x0_hat) + &((1.0 - a_prev).sqrt() * noise))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr0, Array4};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn spec(scale: f64) -> GuidanceSpec {
        GuidanceSpec::new(scale, vec![0], 1).unwrap()
    }

    #[test]
    fn schedules_satisfy_invariants() {
        for sched in [
            NoiseSchedule::cosine(10).unwrap(),
            NoiseSchedule::cosine(50).unwrap(),
            NoiseSchedule::linear_beta(10, 0.02, 0.5).unwrap(),
        ] {
            let ab = sched.coefficients();
            assert_eq!(ab[0], 1.0);
            for t in 1..ab.len() {
                assert!(ab[t] > 0.0 && ab[t] <= 1.0);
                assert!(ab[t] <= ab[t - 1]);
                assert!(ab[t].sqrt().is_finite() && (1.0 - ab[t]).sqrt().is_finite());
            }
        }
    }

    #[test]
    fn schedule_validation_rejects_bad_sequences() {
        assert!(NoiseSchedule::from_alpha_bar(vec![0.9, 0.5]).is_err()); // α_0 ≠ 1
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.2, 0.3]).is_err()); // increasing
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0, 0.0]).is_err()); // zero
        assert!(NoiseSchedule::from_alpha_bar(vec![1.0]).is_err()); // too short
    }

    #[test]
    fn guidance_s1_returns_conditional_bit_for_bit() {
        let mut rng = crate::rng::seeded(11);
        let c: ArrayD<f64> =
            ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 1, 3, 3]), |_| rng.gen_range(-2.0..2.0));
        let u: ArrayD<f64> =
            ArrayD::from_shape_fn(ndarray::IxDyn(&[2, 1, 3, 3]), |_| rng.gen_range(-2.0..2.0));
        let out = classifier_free_noise(&c, &u, &spec(1.0)).unwrap();
        assert_eq!(out, c);
    }

    #[test]
    fn guidance_equal_predictions_is_identity() {
        let c = ArrayD::from_elem(ndarray::IxDyn(&[4]), 0.37);
        for s in [1.0, 2.0, 7.5] {
            let out = classifier_free_noise(&c, &c, &spec(s)).unwrap();
            for v in out.iter() {
                assert_abs_diff_eq!(*v, 0.37, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn guidance_scalar_stub() {
        // hand evaluation: 0.1 + 3·(0.3 − 0.1) = 0.7
        let c = arr0(0.3).into_dyn();
        let u = arr0(0.1).into_dyn();
        let out = classifier_free_noise(&c, &u, &spec(3.0)).unwrap();
        assert_abs_diff_eq!(out[[]], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn guidance_affine_in_scale() {
        let mut rng = crate::rng::seeded(12);
        let c: ArrayD<f64> =
            ArrayD::from_shape_fn(ndarray::IxDyn(&[8]), |_| rng.gen_range(-1.0..1.0));
        let u: ArrayD<f64> =
            ArrayD::from_shape_fn(ndarray::IxDyn(&[8]), |_| rng.gen_range(-1.0..1.0));
        let s1 = classifier_free_noise(&c, &u, &spec(1.0)).unwrap();
        let s2 = classifier_free_noise(&c, &u, &spec(2.0)).unwrap();
        let s3 = classifier_free_noise(&c, &u, &spec(3.0)).unwrap();
        let mid = (&s1 + &s3) / 2.0;
        for (a, b) in s2.iter().zip(mid.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn guidance_rejects_shape_mismatch_and_bad_scale() {
        let c = ArrayD::zeros(ndarray::IxDyn(&[2]));
        let u = ArrayD::zeros(ndarray::IxDyn(&[3]));
        assert!(classifier_free_noise(&c, &u, &spec(2.0)).is_err());
        assert!(GuidanceSpec::new(0.5, vec![], 0).is_err());
    }

    fn latent(data: Array4<f64>, t: usize) -> LatentBatch {
        let b = data.shape()[0];
        LatentBatch::new(data, t, vec![0; b], 99).unwrap()
    }

    #[test]
    fn predict_x0_identity_when_alpha_is_one() {
        // ᾱ_t = 1 reduces the formula to z_t itself.
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 1.0]).unwrap();
        let z = Array4::from_elem((1, 1, 2, 2), 0.42);
        let eps = Array4::from_elem((1, 1, 2, 2), 5.0);
        let out = predict_x0(&latent(z.clone(), 1), &eps, &sched).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn predict_x0_zero_noise_scales_by_sqrt_alpha() {
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25]).unwrap();
        let z = Array4::from_elem((1, 1, 2, 2), 1.0);
        let eps = Array4::zeros((1, 1, 2, 2));
        let out = predict_x0(&latent(z, 1), &eps, &sched).unwrap();
        for v in out.iter() {
            assert_abs_diff_eq!(*v, 2.0, epsilon = 1e-12); // 1/√0.25
        }
    }

    #[test]
    fn predict_x0_round_trip_recovers_clean_latent_at_every_t() {
        let sched = NoiseSchedule::cosine(10).unwrap();
        let mut rng = crate::rng::seeded(13);
        let z0 = Array4::from_shape_fn((2, 1, 4, 4), |_| rng.gen_range(0.0..1.0));
        for t in 1..=sched.num_steps() {
            let a = sched.alpha_bar(t);
            let eps = Array4::from_shape_fn((2, 1, 4, 4), |_| rng.sample::<f64, _>(StandardNormal));
            let zt = &(a.sqrt() * &z0) + &((1.0 - a).sqrt() * &eps);
            let rec = predict_x0(&latent(zt, t), &eps, &sched).unwrap();
            for (r, z) in rec.iter().zip(z0.iter()) {
                let rel = (r - z).abs() / z.abs().max(1.0);
                assert!(rel < 1e-6, "t={t}: relative error {rel:.2e}");
            }
        }
    }

    #[test]
    fn predict_x0_rejects_t0_and_singular_alpha() {
        let sched = NoiseSchedule::cosine(4).unwrap();
        let z = Array4::zeros((1, 1, 2, 2));
        let eps = Array4::zeros((1, 1, 2, 2));
        assert!(matches!(
            predict_x0(&latent(z.clone(), 0), &eps, &sched),
            Err(Error::Contract { .. })
        ));
        let singular = NoiseSchedule::from_alpha_bar_unchecked(vec![1.0, 0.5, 0.0]);
        assert!(matches!(
            predict_x0(&latent(z, 2), &eps, &singular),
            Err(Error::SingularSchedule(_))
        ));
    }

    #[test]
    fn ancestral_step_terminal_cases() {
        // ᾱ_{t−1} = 1: output is exactly x0_hat.
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.3]).unwrap();
        let x0 = Array4::from_elem((1, 1, 2, 2), -0.7);
        let noise = Array4::from_elem((1, 1, 2, 2), 3.0);
        let out = ancestral_step(&x0, &sched, 1, &noise).unwrap();
        assert_eq!(out, x0);

        // ᾱ_{t−1} → 0 is outside the schedule invariant but the formula's
        // limiting case is pure noise; check with an unchecked schedule.
        let degenerate = NoiseSchedule::from_alpha_bar_unchecked(vec![1.0, 0.0, 0.0]);
        let out = ancestral_step(&x0, &degenerate, 2, &noise).unwrap();
        assert_eq!(out, noise);
    }

    #[test]
    fn ancestral_step_scalar_stub() {
        // 0.5·2 + √0.75·1 ≈ 1.8660
        let sched = NoiseSchedule::from_alpha_bar(vec![1.0, 0.25, 0.1]).unwrap();
        let x0 = Array4::from_elem((1, 1, 1, 1), 2.0);
        let noise = Array4::from_elem((1, 1, 1, 1), 1.0);
        let out = ancestral_step(&x0, &sched, 2, &noise).unwrap();
        assert_abs_diff_eq!(out[[0, 0, 0, 0]], 1.8660254037844386, epsilon = 1e-10);
    }

    #[test]
    fn sampling_primitives_are_deterministic() {
        let sched = NoiseSchedule::cosine(6).unwrap();
        let mut rng = crate::rng::seeded(14);
        let z = Array4::from_shape_fn((1, 1, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let eps = Array4::from_shape_fn((1, 1, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let a = predict_x0(&latent(z.clone(), 3), &eps, &sched).unwrap();
        let b = predict_x0(&latent(z, 3), &eps, &sched).unwrap();
        assert_eq!(a, b);
    }
}
